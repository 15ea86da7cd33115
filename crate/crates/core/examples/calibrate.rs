//! Closed-loop calibration run: trains on synthetic images and an unpaired
//! prior, then reports PCK and PA-MPJPE on held-out scenes against the
//! frozen-initialization and zero-depth baselines.
//!
//! cargo run --release --example calibrate -- [steps] [out_dir] [config.toml] [resume.ckpt]

use std::path::PathBuf;
use std::time::Instant;

use selfpose::evaluation::{evaluate_scenes, DEFAULT_ALPHA};
use selfpose::networks::Model;
use selfpose::skeleton::SkeletonTopology;
use selfpose::synthetic::{build_eval_set, build_prior, SyntheticImages};
use selfpose::training::{fit, TrainConfig, TrainData};

fn main() -> selfpose::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let mut cfg = match args.get(3) {
        Some(path) => TrainConfig::load(path.as_ref())?,
        None => TrainConfig::default(),
    };
    if let Some(steps) = args.get(1) {
        cfg.steps = steps.parse().expect("steps");
    }
    let out = PathBuf::from(args.get(2).cloned().unwrap_or_else(|| "calibration".into()));
    let topology = SkeletonTopology::quadruped();
    let images = SyntheticImages::new(
        cfg.scene.clone(),
        topology.clone(),
        cfg.seed,
        cfg.n_train_images,
    )?;
    let prior = build_prior(
        cfg.n_prior,
        &cfg.scene.quadruped,
        &topology,
        &cfg.scene.geometry,
        cfg.seed,
    )?;
    let scenes = build_eval_set(cfg.n_eval, &cfg.scene, &topology, cfg.seed)?;
    let validation = build_eval_set(cfg.validation_size, &cfg.scene, &topology, cfg.seed + 1)?;
    let init = Model::<f32>::new(&cfg.network, &topology, cfg.seed)?;
    let base = evaluate_scenes(
        &init,
        &scenes,
        &topology,
        &cfg.scene.geometry,
        DEFAULT_ALPHA,
    )?;
    println!(
        "init: pck {:.2} pa_mpjpe {:.4} planar {:.4}",
        base.pck.mean, base.pa_mpjpe, base.planar_pa_mpjpe
    );
    let t = Instant::now();
    let data = TrainData {
        images: &images,
        prior: &prior,
        validation: &validation,
    };
    let resume = args.get(4).map(PathBuf::from);
    let outcome = fit(&cfg, &data, &topology, &out, resume.as_deref())?;
    println!(
        "trained {} steps in {:.1}s",
        cfg.steps,
        t.elapsed().as_secs_f64()
    );
    let m = evaluate_scenes(
        &outcome.state.model,
        &scenes,
        &topology,
        &cfg.scene.geometry,
        DEFAULT_ALPHA,
    )?;
    println!(
        "trained: pck {:.2} pa_mpjpe {:.4} planar {:.4} mpjpe {:.4}",
        m.pck.mean, m.pa_mpjpe, m.planar_pa_mpjpe, m.mpjpe
    );
    print!("{}", m.pck.to_table("trained"));
    Ok(())
}
