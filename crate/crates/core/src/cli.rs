//! Command-line entry point.
//!
//! Every command writes into an output directory and leaves a `stamp.json`
//! there with the full argument list, the resolved configuration and the
//! crate version. Relative output paths are resolved against
//! `--output-root` or, failing that, the `SELFPOSE_OUTPUT_ROOT` variable.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_scenes, predict_pixels, DEFAULT_ALPHA};
use crate::ingestion::{
    fetch_video, filter_frames, read_manifest, resize_and_store, split_video, write_manifest,
    AcceptAll, BrightnessDetector, CommandDetector, Detector, DEFAULT_MIN_CONFIDENCE, DEFAULT_SIZE,
    MANIFEST_FILE,
};
use crate::networks::Checkpoint;
use crate::plot::{gray_to_rgb, hstack, novel_views, overlay_2d};
use crate::renderer::SkeletonImage;
use crate::skeleton::{Pose2D, Pose3D, PoseFile, SkeletonTopology};
use crate::synthetic::{build_eval_set, build_prior, import_prior, EvalScene, SyntheticImages};
use crate::training::{fit, ImageSource, StoredImages, TrainConfig, TrainData, TrainState};

pub const OUTPUT_ROOT_ENV: &str = "SELFPOSE_OUTPUT_ROOT";
pub const STAMP_FILE: &str = "stamp.json";
pub const REPORT_FILE: &str = "report.json";
pub const TABLE_FILE: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(
    name = "selfpose",
    version,
    about = "Self-supervised quadruped pose learning"
)]
struct Cli {
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
    /// Skeleton topology file (defaults to the built-in 20-joint quadruped).
    #[arg(long, global = true)]
    topology: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample an unpaired prior of 2D poses from the procedural quadruped.
    GeneratePrior(GeneratePrior),
    /// Write synthetic training images and held-out evaluation scenes.
    MakeDataset(MakeDataset),
    /// Turn videos into 128x128 training frames with masks.
    Ingest(Ingest),
    /// Train all networks without paired labels.
    Train(Train),
    /// Score a checkpoint on evaluation scenes.
    Eval(Eval),
    /// Predict 2D and 3D poses for images.
    Predict(Predict),
    /// Draw 2D overlays and 3D novel-view panels.
    Plot(Plot),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Training configuration (TOML, or a stamp.json from an earlier run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GeneratePrior {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of poses (defaults to the configured prior size).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MakeDataset {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DetectorKind {
    /// Keep every frame with a full mask.
    AcceptAll,
    /// Foreground is every pixel brighter than --threshold.
    Brightness,
    /// Run --detector-cmd on every frame.
    Command,
}

#[derive(Debug, Args)]
struct Ingest {
    /// Animated GIFs or directories of frames.
    videos: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "command")]
    detector: DetectorKind,
    /// Detector program and leading arguments, called with frame and mask paths.
    #[arg(long)]
    detector_cmd: Option<String>,
    #[arg(long, default_value_t = 128)]
    threshold: u8,
    #[arg(long, default_value_t = DEFAULT_MIN_CONFIDENCE)]
    min_confidence: f64,
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    size: u32,
    #[arg(long, default_value = "train")]
    split: String,
    /// Download command with {url} and {out} placeholders.
    #[arg(long, requires = "url")]
    fetch_cmd: Option<String>,
    #[arg(long, requires = "fetch_cmd")]
    url: Vec<String>,
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArg,
    /// Dataset directory from make-dataset or ingest (synthetic images otherwise).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Prior pose file (generated from the config otherwise).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory from make-dataset (scenes regenerated from the checkpoint's config otherwise).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Predict {
    #[arg(long)]
    checkpoint: PathBuf,
    images: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Plot {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stamp {
    pub version: String,
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub topology_hash: String,
    pub config: serde_json::Value,
}

struct Context {
    root: Option<PathBuf>,
    topology: SkeletonTopology,
    argv: Vec<String>,
}

impl Context {
    fn out_dir(&self, out: &Path) -> Result<PathBuf> {
        let dir = match &self.root {
            Some(root) if out.is_relative() => root.join(out),
            _ => out.to_path_buf(),
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(dir)
    }

    fn stamp(&self, dir: &Path, seed: Option<u64>, config: serde_json::Value) -> Result<()> {
        let stamp = Stamp {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.argv.clone(),
            seed,
            topology_hash: self.topology.hash(),
            config,
        };
        let path = dir.join(STAMP_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&stamp)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn dispatch(cli: Cli, args: &[OsString]) -> Result<()> {
    let topology = match &cli.topology {
        Some(p) => SkeletonTopology::load(p)?,
        None => SkeletonTopology::quadruped(),
    };
    let root = cli
        .output_root
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from));
    let ctx = Context {
        root,
        topology,
        argv: args
            .iter()
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
    };
    match cli.command {
        Command::GeneratePrior(c) => generate_prior(&ctx, c),
        Command::MakeDataset(c) => make_dataset(&ctx, c),
        Command::Ingest(c) => ingest(&ctx, c),
        Command::Train(c) => train(&ctx, c),
        Command::Eval(c) => eval(&ctx, c),
        Command::Predict(c) => predict(&ctx, c),
        Command::Plot(c) => plot(&ctx, c),
    }
}

/// Reads a TOML config, or the config inside a stamp when the file is JSON.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let stamp: Stamp = serde_json::from_str(&text).map_err(|e| Error::malformed("stamp", e))?;
        let cfg: TrainConfig = serde_json::from_value(stamp.config)
            .map_err(|e| Error::malformed("stamp config", e))?;
        cfg.validate()?;
        return Ok(cfg);
    }
    TrainConfig::load(path)
}

fn resolve_config(arg: &ConfigArg) -> Result<TrainConfig> {
    let mut cfg = match &arg.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = arg.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub const PRIOR_FILE: &str = "prior.json";

fn generate_prior(ctx: &Context, c: GeneratePrior) -> Result<()> {
    let mut cfg = resolve_config(&c.config)?;
    if let Some(n) = c.n {
        cfg.n_prior = n;
    }
    let dir = ctx.out_dir(&c.out)?;
    let prior = build_prior(
        cfg.n_prior,
        &cfg.scene.quadruped,
        &ctx.topology,
        &cfg.scene.geometry,
        cfg.seed,
    )?;
    prior.save(&dir.join(PRIOR_FILE), &ctx.topology)?;
    ctx.stamp(&dir, Some(cfg.seed), cfg.snapshot())?;
    println!(
        "wrote {} poses to {}",
        prior.len(),
        dir.join(PRIOR_FILE).display()
    );
    Ok(())
}

/// One line of a dataset manifest. Ingested frames carry extra fields,
/// which are ignored here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    pub split: String,
    /// Row of this scene in the split's ground-truth files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_index: Option<usize>,
}

pub const GT2D_FILE: &str = "gt2d.json";
pub const GT3D_FILE: &str = "gt3d.json";
pub const CAMERAS_FILE: &str = "cameras.json";
pub const EVAL_SPLIT: &str = "eval";
pub const VALIDATION_SPLIT: &str = "val";

fn save_gray(pixels: &[f64], size: usize, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(size as u32, size as u32, |x, y| {
        image::Luma([
            (pixels[y as usize * size + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    });
    img.save(path)?;
    Ok(())
}

fn write_scenes(
    dir: &Path,
    split: &str,
    scenes: &[EvalScene],
    topology: &SkeletonTopology,
) -> Result<Vec<DatasetRecord>> {
    let sub = dir.join(split);
    std::fs::create_dir_all(sub.join("images"))
        .map_err(|e| Error::io(format!("creating {}", sub.display()), e))?;
    let gt2d: Vec<Pose2D> = scenes.iter().map(|s| s.gt_pose2d.clone()).collect();
    let gt3d: Vec<Pose3D> = scenes.iter().map(|s| s.gt_pose3d.clone()).collect();
    PoseFile::from_poses(topology, &gt2d, Some(split)).write(&sub.join(GT2D_FILE))?;
    PoseFile::from_poses(topology, &gt3d, Some(split)).write(&sub.join(GT3D_FILE))?;
    let cameras: Vec<_> = scenes.iter().map(|s| s.camera).collect();
    std::fs::write(sub.join(CAMERAS_FILE), serde_json::to_string(&cameras)?)
        .map_err(|e| Error::io(format!("writing {}", sub.display()), e))?;
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let image = format!("{split}/images/{i:06}.png");
            save_gray(s.image.pixels(), s.image.width(), &dir.join(&image))?;
            Ok(DatasetRecord {
                image,
                split: split.into(),
                gt_index: Some(i),
            })
        })
        .collect()
}

fn make_dataset(ctx: &Context, c: MakeDataset) -> Result<()> {
    let cfg = resolve_config(&c.config)?;
    let dir = ctx.out_dir(&c.out)?;
    let images = SyntheticImages::new(
        cfg.scene.clone(),
        ctx.topology.clone(),
        cfg.seed,
        cfg.n_train_images,
    )?;
    let n = cfg.network.image_size;
    let train_dir = dir.join("train/images");
    std::fs::create_dir_all(&train_dir)
        .map_err(|e| Error::io(format!("creating {}", train_dir.display()), e))?;
    let mut records = Vec::new();
    for i in 0..images.len() {
        let image = format!("train/images/{i:06}.png");
        save_gray(&images.image(i)?, n, &dir.join(&image))?;
        records.push(DatasetRecord {
            image,
            split: "train".into(),
            gt_index: None,
        });
    }
    let val = build_eval_set(
        cfg.validation_size.max(1),
        &cfg.scene,
        &ctx.topology,
        cfg.seed + 1,
    )?;
    records.extend(write_scenes(&dir, VALIDATION_SPLIT, &val, &ctx.topology)?);
    let eval = build_eval_set(cfg.n_eval, &cfg.scene, &ctx.topology, cfg.seed)?;
    records.extend(write_scenes(&dir, EVAL_SPLIT, &eval, &ctx.topology)?);
    write_manifest(&dir.join(MANIFEST_FILE), &records)?;
    ctx.stamp(&dir, Some(cfg.seed), cfg.snapshot())?;
    println!(
        "wrote {} training images, {} validation and {} evaluation scenes to {}",
        images.len(),
        val.len(),
        eval.len(),
        dir.display()
    );
    Ok(())
}

/// Loads the scenes of `split` written by make-dataset.
pub fn load_scenes(
    data: &Path,
    split: &str,
    topology: &SkeletonTopology,
    gamma: f64,
) -> Result<Vec<EvalScene>> {
    let records: Vec<DatasetRecord> = read_manifest(&data.join(MANIFEST_FILE))?;
    let sub = data.join(split);
    let gt2d = PoseFile::read(&sub.join(GT2D_FILE))?.to_poses::<2>(topology)?;
    let gt3d = PoseFile::read(&sub.join(GT3D_FILE))?.to_poses::<3>(topology)?;
    let cam_path = sub.join(CAMERAS_FILE);
    let cameras: Vec<crate::geometry::RotationSpec> = serde_json::from_str(
        &std::fs::read_to_string(&cam_path)
            .map_err(|e| Error::io(format!("reading {}", cam_path.display()), e))?,
    )
    .map_err(|e| Error::malformed("camera file", e))?;
    records
        .iter()
        .filter(|r| r.split == split)
        .map(|r| {
            let i = r.gt_index.ok_or_else(|| {
                Error::malformed("manifest", format!("{} has no ground-truth index", r.image))
            })?;
            let (p2, p3, cam) = match (gt2d.get(i), gt3d.get(i), cameras.get(i)) {
                (Some(a), Some(b), Some(c)) => (a.clone(), b.clone(), *c),
                _ => {
                    return Err(Error::malformed(
                        "manifest",
                        format!("ground-truth index {i} out of range"),
                    ))
                }
            };
            let img = image::open(data.join(&r.image))
                .map_err(|e| Error::malformed(format!("image {}", r.image), e.to_string()))?
                .to_luma8();
            let (w, h) = img.dimensions();
            let pixels = img.into_raw().iter().map(|&v| v as f64 / 255.0).collect();
            Ok(EvalScene {
                image: SkeletonImage::from_pixels(pixels, h as usize, w as usize, gamma)?,
                gt_pose2d: p2,
                gt_pose3d: p3,
                camera: cam,
            })
        })
        .collect()
}

fn ingest(ctx: &Context, c: Ingest) -> Result<()> {
    if !(0.0..=1.0).contains(&c.min_confidence) {
        return Err(Error::Config(format!(
            "min confidence {} outside [0, 1]",
            c.min_confidence
        )));
    }
    let dir = ctx.out_dir(&c.out)?;
    let mut videos = c.videos.clone();
    if let Some(template) = &c.fetch_cmd {
        let downloads = dir.join("downloads");
        std::fs::create_dir_all(&downloads)
            .map_err(|e| Error::io(format!("creating {}", downloads.display()), e))?;
        for (i, url) in c.url.iter().enumerate() {
            let dest = downloads.join(format!("video{i:03}.gif"));
            fetch_video(template, url, &dest)?;
            videos.push(dest);
        }
    }
    if videos.is_empty() {
        return Err(Error::Config("no videos given".into()));
    }
    let scratch = scratch_dir(&dir)?;
    let detector: Box<dyn Detector> = match c.detector {
        DetectorKind::AcceptAll => Box::new(AcceptAll),
        DetectorKind::Brightness => Box::new(BrightnessDetector {
            threshold: c.threshold,
            min_fraction: 0.01,
        }),
        DetectorKind::Command => {
            let cmd = c
                .detector_cmd
                .as_deref()
                .ok_or_else(|| Error::Config("--detector command needs --detector-cmd".into()))?;
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("empty detector command".into()))?;
            Box::new(CommandDetector {
                program,
                args: parts.collect(),
                scratch: scratch.clone(),
            })
        }
    };
    let mut kept = Vec::new();
    for v in &videos {
        let video = split_video(v)?;
        let filtered = filter_frames(&video, detector.as_ref(), c.min_confidence)?;
        for w in &filtered.warnings {
            eprintln!("warning: {}: {w}", video.source_id);
        }
        println!(
            "{}: {} frames, {} kept",
            video.source_id,
            video.frames.len(),
            filtered.kept.len()
        );
        kept.extend(filtered.kept);
    }
    let records = resize_and_store(&kept, c.size, &dir, &c.split)?;
    let _ = std::fs::remove_dir_all(&scratch);
    let config = serde_json::json!({
        "videos": videos,
        "detector": format!("{:?}", c.detector),
        "detector_cmd": c.detector_cmd,
        "min_confidence": c.min_confidence,
        "size": c.size,
        "split": c.split,
    });
    ctx.stamp(&dir, None, config)?;
    println!("stored {} frames in {}", records.len(), dir.display());
    Ok(())
}

fn scratch_dir(dir: &Path) -> Result<PathBuf> {
    let scratch = dir.join(".detector");
    std::fs::create_dir_all(&scratch)
        .map_err(|e| Error::io(format!("creating {}", scratch.display()), e))?;
    Ok(scratch)
}

fn train(ctx: &Context, c: Train) -> Result<()> {
    let mut cfg = match (&c.resume, &c.config.config) {
        (Some(ck), None) => TrainState::config_of(&Checkpoint::read(ck, &ctx.topology)?)?,
        _ => resolve_config(&c.config)?,
    };
    if let Some(seed) = c.config.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = c.steps {
        cfg.steps = steps;
    }
    cfg.validate()?;
    let dir = ctx.out_dir(&c.out)?;
    let prior = match &c.prior {
        Some(p) => import_prior(p, &ctx.topology)?,
        None => build_prior(
            cfg.n_prior,
            &cfg.scene.quadruped,
            &ctx.topology,
            &cfg.scene.geometry,
            cfg.seed,
        )?,
    };
    let synthetic;
    let stored;
    let (images, validation): (&dyn ImageSource, Vec<EvalScene>) = match &c.data {
        Some(data) => {
            let records: Vec<DatasetRecord> = read_manifest(&data.join(MANIFEST_FILE))?;
            let paths: Vec<PathBuf> = records
                .iter()
                .filter(|r| r.split == "train")
                .map(|r| data.join(&r.image))
                .collect();
            if paths.is_empty() {
                return Err(Error::Config(format!(
                    "{} lists no training images",
                    data.display()
                )));
            }
            stored = StoredImages::load(&paths, cfg.network.image_size)?;
            let val = if records.iter().any(|r| r.split == VALIDATION_SPLIT) {
                load_scenes(
                    data,
                    VALIDATION_SPLIT,
                    &ctx.topology,
                    cfg.scene.render.gamma,
                )?
            } else {
                Vec::new()
            };
            (&stored, val)
        }
        None => {
            synthetic = SyntheticImages::new(
                cfg.scene.clone(),
                ctx.topology.clone(),
                cfg.seed,
                cfg.n_train_images,
            )?;
            let val = if cfg.validation_every > 0 {
                build_eval_set(
                    cfg.validation_size.max(1),
                    &cfg.scene,
                    &ctx.topology,
                    cfg.seed + 1,
                )?
            } else {
                Vec::new()
            };
            (&synthetic, val)
        }
    };
    let data = TrainData {
        images,
        prior: &prior,
        validation: &validation,
    };
    ctx.stamp(&dir, Some(cfg.seed), cfg.snapshot())?;
    let outcome = fit(&cfg, &data, &ctx.topology, &dir, c.resume.as_deref())?;
    println!(
        "trained to step {}; checkpoint {}, metrics {}",
        outcome.state.step,
        outcome.checkpoint.display(),
        outcome.metrics.display()
    );
    Ok(())
}

fn checkpoint_and_config(ctx: &Context, path: &Path) -> Result<(Checkpoint, TrainConfig)> {
    let ck = Checkpoint::read(path, &ctx.topology)?;
    let cfg = TrainState::config_of(&ck)?;
    Ok((ck, cfg))
}

fn scenes_for(ctx: &Context, cfg: &TrainConfig, data: Option<&Path>) -> Result<Vec<EvalScene>> {
    match data {
        Some(d) => load_scenes(d, EVAL_SPLIT, &ctx.topology, cfg.scene.render.gamma),
        None => build_eval_set(cfg.n_eval, &cfg.scene, &ctx.topology, cfg.seed),
    }
}

fn eval(ctx: &Context, c: Eval) -> Result<()> {
    let (ck, cfg) = checkpoint_and_config(ctx, &c.checkpoint)?;
    let dir = ctx.out_dir(&c.out)?;
    let scenes = scenes_for(ctx, &cfg, c.data.as_deref())?;
    let m = evaluate_scenes(
        &ck.model,
        &scenes,
        &ctx.topology,
        &cfg.scene.geometry,
        c.alpha,
    )?;
    std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&m)?)
        .map_err(|e| Error::io(format!("writing {}", dir.display()), e))?;
    let table = format!(
        "{}\nMPJPE {:.4}  PA-MPJPE {:.4}  zero-depth PA-MPJPE {:.4}\n",
        m.pck.to_table(&format!("step {}", ck.step)),
        m.mpjpe,
        m.pa_mpjpe,
        m.planar_pa_mpjpe
    );
    std::fs::write(dir.join(TABLE_FILE), &table)
        .map_err(|e| Error::io(format!("writing {}", dir.display()), e))?;
    ctx.stamp(
        &dir,
        Some(cfg.seed),
        serde_json::json!({ "checkpoint": c.checkpoint, "alpha": c.alpha, "data": c.data, "train": cfg.snapshot() }),
    )?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    pub pose2d: Vec<[f64; 2]>,
    pub depth_offsets: Vec<f64>,
    pub pose3d: Vec<[f64; 3]>,
}

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

fn predict(ctx: &Context, c: Predict) -> Result<()> {
    let (ck, cfg) = checkpoint_and_config(ctx, &c.checkpoint)?;
    if c.images.is_empty() {
        return Err(Error::Config("no images given".into()));
    }
    let dir = ctx.out_dir(&c.out)?;
    let n = cfg.network.image_size;
    let stored = StoredImages::load(&c.images, n)?;
    let pixels: Vec<Vec<f64>> = (0..stored.len())
        .map(|i| stored.image(i))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = pixels.iter().map(Vec::as_slice).collect();
    let p = predict_pixels(&ck.model, &ctx.topology, &cfg.scene.geometry, &refs, 16)?;
    let skel_dir = dir.join("skeletons");
    std::fs::create_dir_all(&skel_dir)
        .map_err(|e| Error::io(format!("creating {}", skel_dir.display()), e))?;
    let mut records = Vec::new();
    for (i, path) in c.images.iter().enumerate() {
        save_gray(
            &p.skeleton_images[i],
            n,
            &skel_dir.join(format!("{i:06}.png")),
        )?;
        records.push(PredictionRecord {
            image: path.display().to_string(),
            pose2d: p.poses2d[i].coords().to_vec(),
            depth_offsets: p.depth_offsets[i].clone(),
            pose3d: p.poses3d[i].coords().to_vec(),
        });
    }
    write_manifest(&dir.join(PREDICTIONS_FILE), &records)?;
    ctx.stamp(
        &dir,
        Some(cfg.seed),
        serde_json::json!({ "checkpoint": c.checkpoint, "images": c.images, "train": cfg.snapshot() }),
    )?;
    println!(
        "wrote {} predictions to {}",
        records.len(),
        dir.join(PREDICTIONS_FILE).display()
    );
    Ok(())
}

fn plot(ctx: &Context, c: Plot) -> Result<()> {
    let (ck, cfg) = checkpoint_and_config(ctx, &c.checkpoint)?;
    let dir = ctx.out_dir(&c.out)?;
    let scenes = scenes_for(ctx, &cfg, c.data.as_deref())?;
    let scenes = &scenes[..c.count.min(scenes.len())];
    let pixels: Vec<&[f64]> = scenes.iter().map(|s| s.image.pixels()).collect();
    let p = predict_pixels(&ck.model, &ctx.topology, &cfg.scene.geometry, &pixels, 16)?;
    let n = cfg.network.image_size;
    let azimuths: Vec<f64> = (0..4)
        .map(|k| k as f64 * std::f64::consts::FRAC_PI_2)
        .collect();
    for (i, scene) in scenes.iter().enumerate() {
        let background = gray_to_rgb(scene.image.pixels(), n, n, 2)?;
        let overlay = overlay_2d(
            &background,
            &p.poses2d[i],
            Some(&scene.gt_pose2d),
            &ctx.topology,
        )?;
        let skeleton = gray_to_rgb(&p.skeleton_images[i], n, n, 2)?;
        hstack(&[overlay, skeleton]).save(dir.join(format!("overlay_{i:03}.png")))?;
        let delta = cfg.scene.geometry.delta;
        let predicted = novel_views(&p.poses3d[i], &ctx.topology, &azimuths, delta, 2 * n as u32)?;
        let truth = novel_views(
            &scene.camera_pose3d(&cfg.scene.geometry)?,
            &ctx.topology,
            &azimuths,
            delta,
            2 * n as u32,
        )?;
        let mut panel = image::RgbImage::new(predicted.width(), predicted.height() * 2);
        image::imageops::replace(&mut panel, &predicted, 0, 0);
        image::imageops::replace(&mut panel, &truth, 0, predicted.height() as i64);
        panel.save(dir.join(format!("views_{i:03}.png")))?;
    }
    ctx.stamp(
        &dir,
        Some(cfg.seed),
        serde_json::json!({ "checkpoint": c.checkpoint, "data": c.data, "count": c.count, "train": cfg.snapshot() }),
    )?;
    println!(
        "wrote {} overlays and view panels to {}",
        scenes.len(),
        dir.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_and_usage_errors() {
        assert_eq!(run(["selfpose", "--help"]), 0);
        assert_eq!(run(["selfpose", "train", "--help"]), 0);
        assert_eq!(run(["selfpose", "--no-such-flag"]), 1);
        assert_eq!(run(["selfpose", "frobnicate"]), 1);
        assert_eq!(run(["selfpose", "generate-prior"]), 1);
    }

    #[test]
    fn runtime_failures_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("missing.ckpt");
        let code = run([
            "selfpose",
            "eval",
            "--checkpoint",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn prior_lands_under_output_root_with_stamp() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_str().unwrap();
        let code = run([
            "selfpose",
            "--output-root",
            root,
            "generate-prior",
            "--n",
            "5",
            "--seed",
            "3",
            "--out",
            "p",
        ]);
        assert_eq!(code, 0);
        let topo = SkeletonTopology::quadruped();
        let prior = import_prior(&dir.path().join("p").join(PRIOR_FILE), &topo).unwrap();
        assert_eq!(prior.len(), 5);
        let cfg = load_config(&dir.path().join("p").join(STAMP_FILE)).unwrap();
        assert_eq!(cfg.seed, 3);
        let again = build_prior(
            5,
            &cfg.scene.quadruped,
            &topo,
            &cfg.scene.geometry,
            cfg.seed,
        )
        .unwrap();
        assert_eq!(again.poses, prior.poses);
    }
}
