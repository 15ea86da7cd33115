//! The self-supervised objective and the alternating adversarial training
//! loop.
//!
//! Each step first updates D on real prior renders against detached Φ
//! outputs, then updates Φ, Ω and Λ together on
//! `w_d * g_adv + w_gc * L_gc + w_omega * L_omega`. Every random draw of
//! step `k` comes from streams indexed by `k`, so a run resumed from a
//! checkpoint replays exactly what an uninterrupted run would have done.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_scenes, DEFAULT_ALPHA};
use crate::geometry::{cycle_on_tape, poses_to_tensor, sample_rotation, RotationMatrix};
use crate::networks::{Bound, Checkpoint, Group, Model, NetworkConfig, ParamSet};
use crate::renderer::{images_to_tensor, render_batch, render_on_tape, RenderConfig};
use crate::rng::{stream_rng, Stream};
use crate::skeleton::SkeletonTopology;
use crate::synthetic::{EvalScene, PriorSet, SceneConfig, SyntheticImages};
use crate::tensor::{Real, Tensor};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Balance between the two terms of the Ω loss.
    pub lambda: f64,
    pub w_d: f64,
    pub w_gc: f64,
    pub w_omega: f64,
    pub disc_updates_per_step: usize,
    /// Std of Gaussian noise added to every image D sees, real or fake.
    pub disc_input_noise: f64,
    /// Leading steps that train only Ω on rendered prior poses; Φ, Λ and D
    /// stay fixed until Ω can read a skeleton image.
    pub omega_warmup_steps: u64,
    /// Stop the render-consistency term from moving Φ.
    pub detach_skeleton_in_omega: bool,
    /// Let the consistency cycle back-propagate into Ω and Φ.
    pub gc_into_pose_network: bool,
    pub checkpoint_every: u64,
    pub validation_every: u64,
    pub validation_size: usize,
    pub n_train_images: usize,
    pub n_prior: usize,
    pub n_eval: usize,
    pub network: NetworkConfig,
    pub scene: SceneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            steps: 1400,
            batch_size: 8,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda: 1.0,
            w_d: 1.0,
            w_gc: 1.0,
            w_omega: 1.0,
            disc_updates_per_step: 1,
            disc_input_noise: 0.2,
            omega_warmup_steps: 800,
            detach_skeleton_in_omega: true,
            gc_into_pose_network: false,
            checkpoint_every: 500,
            validation_every: 250,
            validation_size: 32,
            n_train_images: 6000,
            n_prior: 2000,
            n_eval: 300,
            network: NetworkConfig::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::UnknownSchemaVersion {
                found: cfg.schema_version,
                supported: CONFIG_SCHEMA_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InsufficientBatch(self.batch_size));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        for (name, w) in [
            ("w_d", self.w_d),
            ("w_gc", self.w_gc),
            ("w_omega", self.w_omega),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {w}"
                )));
            }
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {lr}"
                )));
            }
        }
        if !((0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_eps > 0.0)
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if !(self.disc_input_noise >= 0.0 && self.disc_input_noise.is_finite()) {
            return Err(Error::Config(format!(
                "disc_input_noise must be non-negative, got {}",
                self.disc_input_noise
            )));
        }
        if self.disc_updates_per_step == 0 {
            return Err(Error::Config(
                "disc_updates_per_step must be at least 1".into(),
            ));
        }
        if self.n_train_images == 0 || self.n_prior == 0 {
            return Err(Error::Config(
                "training needs images and prior poses".into(),
            ));
        }
        if self.network.image_size != self.scene.render.height
            || self.network.image_size != self.scene.render.width
        {
            return Err(Error::Config(format!(
                "network image size {} does not match render size {}x{}",
                self.network.image_size, self.scene.render.height, self.scene.render.width
            )));
        }
        self.network.validate()?;
        self.scene.quadruped.validate()?;
        self.scene.geometry.validate()?;
        self.scene.render.validate()
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Source of unlabelled training images, each `C * N * N` values in `[0, 1]`.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn image(&self, index: usize) -> Result<Vec<f64>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for SyntheticImages {
    fn len(&self) -> usize {
        self.len
    }

    fn image(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.sample(index)?.pixels)
    }
}

/// Images held in memory as 8-bit grey levels.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredImages {
    pub size: usize,
    pub images: Vec<Vec<u8>>,
}

impl StoredImages {
    /// Loads every listed PNG, converting to grey and checking its size.
    pub fn load(paths: &[PathBuf], size: usize) -> Result<Self> {
        let images = paths
            .iter()
            .map(|p| {
                let img = image::open(p)
                    .map_err(|e| Error::malformed(format!("image {}", p.display()), e.to_string()))?
                    .to_luma8();
                if img.dimensions() != (size as u32, size as u32) {
                    return Err(Error::Shape(format!(
                        "{} is {}x{}, expected {size}x{size}",
                        p.display(),
                        img.width(),
                        img.height()
                    )));
                }
                Ok(img.into_raw())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { size, images })
    }
}

impl ImageSource for StoredImages {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn image(&self, index: usize) -> Result<Vec<f64>> {
        let img = self
            .images
            .get(index)
            .ok_or_else(|| Error::Config(format!("image index {index} out of range")))?;
        Ok(img.iter().map(|&v| v as f64 / 255.0).collect())
    }
}

/// One step's inputs. Images and prior poses are drawn independently.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    /// Renders of prior poses shown to D as real, input noise included.
    pub real: Tensor<f32>,
    /// Input noise for D's view of Φ's output.
    pub fake_noise: Option<Tensor<f32>>,
    /// Fresh prior poses for the Ω term, and their renders.
    pub prior_poses: Tensor<f32>,
    pub prior_images: Tensor<f32>,
    pub rotations: Vec<RotationMatrix>,
}

pub fn make_batch(
    step: u64,
    cfg: &TrainConfig,
    images: &dyn ImageSource,
    prior: &PriorSet,
    topology: &SkeletonTopology,
) -> Result<Batch> {
    if images.is_empty() || prior.is_empty() {
        return Err(Error::Config(
            "training needs at least one image and one prior pose".into(),
        ));
    }
    let b = cfg.batch_size;
    let n = cfg.network.image_size;
    let mut rng = stream_rng(cfg.seed, Stream::Batches, step);
    let image_ids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..images.len())).collect();
    let real_ids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..prior.len())).collect();
    let omega_ids: Vec<usize> = (0..b).map(|_| rng.gen_range(0..prior.len())).collect();
    let mut data = Vec::with_capacity(b * n * n);
    for &i in &image_ids {
        let img = images.image(i)?;
        if img.len() != cfg.network.in_channels * n * n {
            return Err(Error::Shape(format!(
                "training image {i} has {} values",
                img.len()
            )));
        }
        data.extend(img.iter().map(|&v| v as f32));
    }
    let pick = |ids: &[usize]| {
        ids.iter()
            .map(|&i| prior.poses[i].clone())
            .collect::<Vec<_>>()
    };
    let (real_poses, omega_poses) = (pick(&real_ids), pick(&omega_ids));
    let render = &cfg.scene.render;
    let mut rot_rng = stream_rng(cfg.seed, Stream::Rotations, step);
    let geometry = &cfg.scene.geometry;
    let rotations = (0..b)
        .map(|_| {
            sample_rotation(
                &mut rot_rng,
                geometry.azimuth_range,
                geometry.elevation_range,
            )
            .map(|(_, r)| r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut real: Tensor<f32> = images_to_tensor(&render_batch(&real_poses, topology, render)?)?;
    let mut fake_noise = None;
    if cfg.disc_input_noise > 0.0 {
        let normal = Normal::new(0.0, cfg.disc_input_noise).expect("validated std");
        let mut noise_rng = stream_rng(cfg.seed, Stream::DiscNoise, step);
        let mut draw = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..len)
                    .map(|_| normal.sample(&mut noise_rng) as f32)
                    .collect(),
            )
        };
        real.add_assign(&draw(real.shape()));
        fake_noise = Some(draw(&[b, 1, n, n]));
    }
    Ok(Batch {
        images: Tensor::new([b, cfg.network.in_channels, n, n], data),
        real,
        fake_noise,
        prior_images: images_to_tensor(&render_batch(&omega_poses, topology, render)?)?,
        prior_poses: poses_to_tensor(&omega_poses),
        rotations,
    })
}

/// `d_loss = -mean log σ(real) - mean log(1 - σ(fake))`.
pub fn disc_loss_from_logits<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    if tape.shape(real) != tape.shape(fake) {
        return Err(Error::LengthMismatch {
            left: tape.value(real).len(),
            right: tape.value(fake).len(),
        });
    }
    let lr = tape.log_sigmoid(real);
    let a = tape.mean(lr);
    // log(1 - σ(x)) = log σ(-x)
    let neg = tape.scale(fake, -1.0);
    let lf = tape.log_sigmoid(neg);
    let b = tape.mean(lf);
    let s = tape.add(a, b);
    Ok(tape.scale(s, -1.0))
}

/// Non-saturating generator loss `-mean log σ(fake)`.
pub fn generator_adv_loss<T: Real>(tape: &mut Tape<T>, fake: Var) -> Var {
    let l = tape.log_sigmoid(fake);
    let m = tape.mean(l);
    tape.scale(m, -1.0)
}

/// Both adversarial losses for real renders `w` and Φ outputs `s`. The
/// discriminator loss sees `s` detached; the generator loss flows into `s`.
pub fn loss_discriminator(
    tape: &mut Tape<f32>,
    model: &Model<f32>,
    disc: &Bound,
    w: Var,
    s: Var,
) -> Result<(Var, Var)> {
    if tape.shape(w) != tape.shape(s) {
        return Err(Error::LengthMismatch {
            left: tape.shape(w)[0],
            right: tape.shape(s)[0],
        });
    }
    let real = model.disc_forward(tape, disc, w)?;
    let s_detached = tape.detach(s);
    let fake_detached = model.disc_forward(tape, disc, s_detached)?;
    let d_loss = disc_loss_from_logits(tape, real, fake_detached)?;
    let fake = model.disc_forward(tape, disc, s)?;
    Ok((d_loss, generator_adv_loss(tape, fake)))
}

/// Terms of the Ω loss.
#[derive(Clone, Copy, Debug)]
pub struct OmegaTerms {
    /// Batch mean of `|Ω(β(p)) - p|²`.
    pub prior: Var,
    /// Per-pixel mean of `(β(y) - s)²`.
    pub render: Var,
    /// `prior + lambda * render`.
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn loss_omega(
    tape: &mut Tape<f32>,
    model: &Model<f32>,
    omega: &Bound,
    prior_poses: Var,
    prior_images: Var,
    y: Var,
    s: Var,
    lambda: f64,
    topology: &SkeletonTopology,
    render: &RenderConfig,
    detach_s: bool,
) -> Result<OmegaTerms> {
    let b = tape.shape(prior_poses)[0] as f64;
    let pred = model.omega_forward(tape, omega, prior_images)?;
    let diff = tape.sub(pred, prior_poses);
    let sq = tape.sum_sq(diff);
    let prior = tape.scale(sq, 1.0 / b);
    let rendered = render_on_tape(tape, y, topology, render)?;
    let target = if detach_s { tape.detach(s) } else { s };
    if tape.shape(rendered) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "rendered poses {:?} vs skeleton images {:?}",
            tape.shape(rendered),
            tape.shape(target)
        )));
    }
    let d = tape.sub(rendered, target);
    let n = tape.value(d).len() as f64;
    let sq = tape.sum_sq(d);
    let render_term = tape.scale(sq, 1.0 / n);
    let weighted = tape.scale(render_term, lambda);
    let total = tape.add(prior, weighted);
    Ok(OmegaTerms {
        prior,
        render: render_term,
        total,
    })
}

/// Logged loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub d_loss: f64,
    pub g_adv: f64,
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub loss_r3d: f64,
    pub loss_gc: f64,
    pub omega_prior: f64,
    pub omega_render: f64,
    pub loss_omega: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_d: f64,
    pub w_gc: f64,
    pub w_omega: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            w_d: cfg.w_d,
            w_gc: cfg.w_gc,
            w_omega: cfg.w_omega,
        }
    }

    /// `w_d * g_adv + w_gc * l_gc + w_omega * l_omega`.
    pub fn combine(&self, g_adv: f64, l_gc: f64, l_omega: f64) -> f64 {
        self.w_d * g_adv + self.w_gc * l_gc + self.w_omega * l_omega
    }
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 10] {
        [
            ("d_loss", self.d_loss),
            ("g_adv", self.g_adv),
            ("loss_2d", self.loss_2d),
            ("loss_3d", self.loss_3d),
            ("loss_r3d", self.loss_r3d),
            ("loss_gc", self.loss_gc),
            ("omega_prior", self.omega_prior),
            ("omega_render", self.omega_render),
            ("loss_omega", self.loss_omega),
            ("total", self.total),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    fn describe(&self) -> String {
        self.terms()
            .iter()
            .map(|(n, v)| format!("{n}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Adaptive-moment optimizer state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamGroup {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamGroup {
    pub fn zeros(set: &ParamSet<f32>) -> Self {
        let z = || {
            set.params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            t: 0,
            m: z(),
            v: z(),
        }
    }

    pub fn update(
        &mut self,
        set: &mut ParamSet<f32>,
        grads: &[Option<&Tensor<f32>>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let c1 = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (cfg.adam_eps * c2.sqrt()) as f32;
        for (((p, m), v), g) in set
            .params
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(grads)
        {
            let Some(g) = g else {
                // untouched by the graph: zero gradient
                for (mi, vi) in m.data_mut().iter_mut().zip(v.data_mut()) {
                    *mi *= b1;
                    *vi *= b2;
                }
                continue;
            };
            let (pd, md, vd) = (p.value.data_mut(), m.data_mut(), v.data_mut());
            for (((w, mi), vi), &gi) in pd.iter_mut().zip(md).zip(vd).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: Model<f32>,
    pub adam: [AdamGroup; 4],
    /// Exponential moving average of the generator total, 0.9 decay.
    pub ema_total: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, topology: &SkeletonTopology) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.network, topology, cfg.seed)?;
        let adam = Group::ALL.map(|g| AdamGroup::zeros(model.group(g)));
        Ok(Self {
            step: 0,
            model,
            adam,
            ema_total: None,
        })
    }

    fn adam_index(group: Group) -> usize {
        Group::ALL
            .iter()
            .position(|&g| g == group)
            .expect("known group")
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut extra = Vec::new();
        for g in Group::ALL {
            let a = &self.adam[Self::adam_index(g)];
            for ((p, m), v) in self.model.group(g).params.iter().zip(&a.m).zip(&a.v) {
                extra.push((format!("adam_m.{}.{}", g.name(), p.name), m.clone()));
                extra.push((format!("adam_v.{}.{}", g.name(), p.name), v.clone()));
            }
        }
        let adam_t: Vec<u64> = self.adam.iter().map(|a| a.t).collect();
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            config: serde_json::json!({
                "train": cfg.snapshot(),
                "adam_t": adam_t,
                "ema_total": self.ema_total,
            }),
            extra,
        }
    }

    /// Rebuilds the state from a checkpoint written by [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let bad = |d: &str| Error::malformed("checkpoint", d.to_string());
        let adam_t: Vec<u64> = serde_json::from_value(ck.config["adam_t"].clone())
            .map_err(|_| bad("missing optimizer step"))?;
        let ema_total: Option<f64> =
            serde_json::from_value(ck.config["ema_total"].clone()).map_err(|_| bad("bad ema"))?;
        if adam_t.len() != 4 {
            return Err(bad("optimizer step count"));
        }
        let mut extra: std::collections::HashMap<String, Tensor<f32>> =
            ck.extra.into_iter().collect();
        let mut adam = Group::ALL.map(|g| AdamGroup::zeros(ck.model.group(g)));
        for g in Group::ALL {
            let a = &mut adam[Self::adam_index(g)];
            a.t = adam_t[Self::adam_index(g)];
            for (k, p) in ck.model.group(g).params.iter().enumerate() {
                for (prefix, slot) in [("adam_m", &mut a.m[k]), ("adam_v", &mut a.v[k])] {
                    let key = format!("{prefix}.{}.{}", g.name(), p.name);
                    let t = extra
                        .remove(&key)
                        .ok_or_else(|| bad(&format!("missing {key}")))?;
                    if t.shape() != p.value.shape() {
                        return Err(bad(&format!("{key} has the wrong shape")));
                    }
                    *slot = t;
                }
            }
        }
        Ok(Self {
            step: ck.step,
            model: ck.model,
            adam,
            ema_total,
        })
    }

    /// Training configuration stored in a checkpoint.
    pub fn config_of(ck: &Checkpoint) -> Result<TrainConfig> {
        serde_json::from_value(ck.config["train"].clone())
            .map_err(|e| Error::malformed("checkpoint config", e.to_string()))
    }
}

fn scalar(tape: &Tape<f32>, v: Var) -> f64 {
    tape.value(v).item() as f64
}

fn group_grads<'a>(
    grads: &'a Gradients<f32>,
    bound: &Bound,
    set: &ParamSet<f32>,
) -> Vec<Option<&'a Tensor<f32>>> {
    bound
        .ordered(set)
        .into_iter()
        .map(|v| grads.get(v))
        .collect()
}

/// Generator-side graph of one step, built on a tape that already holds
/// Φ's output `s`.
struct GeneratorGraph {
    total: Var,
    breakdown: LossBreakdown,
    omega: Bound,
    lifter: Bound,
}

#[allow(clippy::too_many_arguments)]
fn generator_graph(
    tape: &mut Tape<f32>,
    model: &Model<f32>,
    s: Var,
    batch: &Batch,
    cfg: &TrainConfig,
    topology: &SkeletonTopology,
    step: u64,
    d_loss: f64,
) -> Result<GeneratorGraph> {
    let omega = model.omega.bind(tape, true);
    let lifter = model.lifter.bind(tape, true);
    let disc = model.disc.bind(tape, false);
    let y = model.omega_forward(tape, &omega, s)?;
    let seen = match &batch.fake_noise {
        Some(noise) => {
            let noise = tape.constant(noise.clone());
            tape.add(s, noise)
        }
        None => s,
    };
    let fake = model.disc_forward(tape, &disc, seen)?;
    let g_adv = generator_adv_loss(tape, fake);
    let prior_poses = tape.constant(batch.prior_poses.clone());
    let prior_images = tape.constant(batch.prior_images.clone());
    let om = loss_omega(
        tape,
        model,
        &omega,
        prior_poses,
        prior_images,
        y,
        s,
        cfg.lambda,
        topology,
        &cfg.scene.render,
        cfg.detach_skeleton_in_omega,
    )?;
    let y_in = if cfg.gc_into_pose_network {
        y
    } else {
        tape.detach(y)
    };
    let y_centred = tape.sub_joint(y_in, model.root);
    let mut dropout = stream_rng(cfg.seed, Stream::Dropout, step);
    let gc = cycle_on_tape(
        tape,
        y_centred,
        |t, yy| model.lifter_forward(t, &lifter, yy, Some(&mut dropout)),
        &batch.rotations,
        &cfg.scene.geometry,
    )?;
    let a = tape.scale(g_adv, cfg.w_d);
    let b = tape.scale(gc.loss_gc, cfg.w_gc);
    let c = tape.scale(om.total, cfg.w_omega);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);

    let g_val = scalar(tape, g_adv);
    let (l2, l3, lr3) = (
        scalar(tape, gc.loss_2d),
        scalar(tape, gc.loss_3d),
        scalar(tape, gc.loss_r3d),
    );
    let loss_gc = l2 + l3 + lr3;
    let (op, or) = (scalar(tape, om.prior), scalar(tape, om.render));
    let loss_omega = op + cfg.lambda * or;
    let breakdown = LossBreakdown {
        d_loss,
        g_adv: g_val,
        loss_2d: l2,
        loss_3d: l3,
        loss_r3d: lr3,
        loss_gc,
        omega_prior: op,
        omega_render: or,
        loss_omega,
        total: LossWeights::from_config(cfg).combine(g_val, loss_gc, loss_omega),
    };
    if !breakdown.all_finite() || !tape.value(total).all_finite() {
        return Err(Error::Diverged {
            step,
            breakdown: breakdown.describe(),
        });
    }
    Ok(GeneratorGraph {
        total,
        breakdown,
        omega,
        lifter,
    })
}

/// Φ's output as D sees it.
fn noisy(s: &Tensor<f32>, batch: &Batch) -> Tensor<f32> {
    let mut out = s.clone();
    if let Some(noise) = &batch.fake_noise {
        out.add_assign(noise);
    }
    out
}

fn disc_loss_value(
    model: &Model<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    trainable: bool,
) -> Result<(Tape<f32>, Bound, Var)> {
    let mut tape = Tape::new();
    let disc = model.disc.bind(&mut tape, trainable);
    let w = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let lr = model.disc_forward(&mut tape, &disc, w)?;
    let lf = model.disc_forward(&mut tape, &disc, f)?;
    let loss = disc_loss_from_logits(&mut tape, lr, lf)?;
    Ok((tape, disc, loss))
}

/// Generator gradients of the Φ, Ω and Λ groups, in parameter order.
pub type GroupGrads = [Vec<Option<Tensor<f32>>>; 3];

/// Generator objective of a batch with its breakdown and the gradients of
/// the total with respect to the Φ, Ω and Λ parameters (`None` where the
/// graph does not reach).
pub fn total_loss(
    model: &Model<f32>,
    batch: &Batch,
    cfg: &TrainConfig,
    topology: &SkeletonTopology,
    step: u64,
) -> Result<(f64, LossBreakdown, GroupGrads)> {
    let mut tape = Tape::new();
    let phi = model.phi.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let s = model.phi_forward(&mut tape, &phi, x)?;
    let s_value = noisy(tape.value(s), batch);
    let (dt, _, dl) = disc_loss_value(model, &batch.real, &s_value, false)?;
    let g = generator_graph(
        &mut tape,
        model,
        s,
        batch,
        cfg,
        topology,
        step,
        scalar(&dt, dl),
    )?;
    let mut grads = tape.backward(g.total);
    let mut take = |b: &Bound, set: &ParamSet<f32>| {
        b.ordered(set)
            .into_iter()
            .map(|v| grads.take(v))
            .collect::<Vec<_>>()
    };
    let out = [
        take(&phi, &model.phi),
        take(&g.omega, &model.omega),
        take(&g.lifter, &model.lifter),
    ];
    Ok((g.breakdown.total, g.breakdown, out))
}

/// Ω update on the prior term alone. Every other logged term is zero.
fn omega_warmup_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let step = state.step;
    let mut tape = Tape::new();
    let omega = state.model.omega.bind(&mut tape, true);
    let poses = tape.constant(batch.prior_poses.clone());
    let images = tape.constant(batch.prior_images.clone());
    let pred = state.model.omega_forward(&mut tape, &omega, images)?;
    let diff = tape.sub(pred, poses);
    let sq = tape.sum_sq(diff);
    let prior = tape.scale(sq, 1.0 / tape.shape(poses)[0] as f64);
    let op = scalar(&tape, prior);
    let breakdown = LossBreakdown {
        omega_prior: op,
        loss_omega: op,
        total: LossWeights::from_config(cfg).combine(0.0, 0.0, op),
        ..Default::default()
    };
    if !breakdown.all_finite() {
        return Err(Error::Diverged {
            step,
            breakdown: breakdown.describe(),
        });
    }
    let grads = tape.backward(prior);
    let gs = group_grads(&grads, &omega, &state.model.omega);
    state.adam[1].update(&mut state.model.omega, &gs, cfg.lr_generator, cfg);
    state.step += 1;
    Ok(breakdown)
}

/// One discriminator update followed by one generator update, or an Ω-only
/// update during warmup.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    topology: &SkeletonTopology,
) -> Result<LossBreakdown> {
    let step = state.step;
    if step < cfg.omega_warmup_steps {
        return omega_warmup_step(state, batch, cfg);
    }
    // Φ's output does not depend on D, so one generator forward serves both
    // updates; D's parameters enter the generator graph after D has moved.
    let mut tape = Tape::new();
    let phi = state.model.phi.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let s = state.model.phi_forward(&mut tape, &phi, x)?;
    let s_value = noisy(tape.value(s), batch);

    let mut d_loss = f64::NAN;
    for _ in 0..cfg.disc_updates_per_step {
        let (dt, disc, loss) = disc_loss_value(&state.model, &batch.real, &s_value, true)?;
        d_loss = scalar(&dt, loss);
        if !d_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                breakdown: format!("d_loss={d_loss}"),
            });
        }
        let grads = dt.backward(loss);
        let dg = group_grads(&grads, &disc, &state.model.disc);
        state.adam[3].update(&mut state.model.disc, &dg, cfg.lr_discriminator, cfg);
    }

    let g = generator_graph(
        &mut tape,
        &state.model,
        s,
        batch,
        cfg,
        topology,
        step,
        d_loss,
    )?;
    let grads = tape.backward(g.total);
    let model = &mut state.model;
    let sets = [
        (0, Group::Phi, &phi),
        (1, Group::Omega, &g.omega),
        (2, Group::Lifter, &g.lifter),
    ];
    for (k, group, bound) in sets {
        let set = model.group_mut(group);
        let gs = group_grads(&grads, bound, set);
        let owned: Vec<Option<Tensor<f32>>> = gs.into_iter().map(|g| g.cloned()).collect();
        let refs: Vec<Option<&Tensor<f32>>> = owned.iter().map(|g| g.as_ref()).collect();
        state.adam[k].update(set, &refs, cfg.lr_generator, cfg);
    }
    state.step += 1;
    state.ema_total = Some(match state.ema_total {
        Some(e) => 0.9 * e + 0.1 * g.breakdown.total,
        None => g.breakdown.total,
    });
    Ok(g.breakdown)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub term: String,
    pub value: f64,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            Ok(serde_json::from_str(&line)?)
        })
        .collect()
}

/// Inputs to [`fit`].
pub struct TrainData<'a> {
    pub images: &'a dyn ImageSource,
    pub prior: &'a PriorSet,
    pub validation: &'a [EvalScene],
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:08}.ckpt"))
}

/// Trains until `cfg.steps`, starting from `resume` when given. Writes
/// periodic checkpoints, `final.ckpt` and an append-only metrics log in
/// `out_dir`.
pub fn fit(
    cfg: &TrainConfig,
    data: &TrainData,
    topology: &SkeletonTopology,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let metrics = out_dir.join(METRICS_FILE);
    let mut state = match resume {
        Some(path) => TrainState::from_checkpoint(Checkpoint::read(path, topology)?)?,
        None => TrainState::new(cfg, topology)?,
    };
    // keep only records the resumed state has already produced
    let kept: Vec<MetricRecord> = if resume.is_some() && metrics.exists() {
        read_metrics(&metrics)?
            .into_iter()
            .filter(|r| r.step < state.step)
            .collect()
    } else {
        Vec::new()
    };
    let open = |e| Error::io(format!("writing {}", metrics.display()), e);
    let mut log = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&metrics)
            .map_err(open)?,
    );
    let write_record =
        |log: &mut BufWriter<File>, step: u64, term: &str, value: f64| -> Result<()> {
            let rec = MetricRecord {
                step,
                term: term.to_string(),
                value,
            };
            writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(open)
        };
    for r in &kept {
        write_record(&mut log, r.step, &r.term, r.value)?;
    }
    while state.step < cfg.steps {
        let step = state.step;
        let batch = make_batch(step, cfg, data.images, data.prior, topology)?;
        let breakdown = train_step(&mut state, &batch, cfg, topology)?;
        for (term, value) in breakdown.terms() {
            write_record(&mut log, step, term, value)?;
        }
        let done = state.step;
        if cfg.validation_every > 0
            && done % cfg.validation_every == 0
            && !data.validation.is_empty()
        {
            let n = cfg.validation_size.min(data.validation.len()).max(1);
            let m = evaluate_scenes(
                &state.model,
                &data.validation[..n],
                topology,
                &cfg.scene.geometry,
                DEFAULT_ALPHA,
            )?;
            write_record(&mut log, step, "val_pck", m.pck.mean)?;
            write_record(&mut log, step, "val_pa_mpjpe", m.pa_mpjpe)?;
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            log.flush().map_err(open)?;
            state
                .to_checkpoint(cfg)
                .write(&checkpoint_path(out_dir, done))?;
        }
    }
    log.flush().map_err(open)?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    state.to_checkpoint(cfg).write(&checkpoint)?;
    Ok(FitOutcome {
        state,
        checkpoint,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::build_prior;

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: 2,
            steps: 4,
            n_train_images: 16,
            n_prior: 16,
            checkpoint_every: 2,
            validation_every: 0,
            omega_warmup_steps: 0,
            ..Default::default()
        };
        cfg.network.image_size = 32;
        cfg.network.lifter_width = 32;
        cfg.scene.render.height = 32;
        cfg.scene.render.width = 32;
        cfg.scene.render.gamma = 500.0 / 16.0;
        cfg
    }

    struct Fixture {
        cfg: TrainConfig,
        topology: SkeletonTopology,
        images: SyntheticImages,
        prior: PriorSet,
    }

    fn fixture(cfg: TrainConfig) -> Fixture {
        let topology = SkeletonTopology::quadruped();
        let images = SyntheticImages::new(
            cfg.scene.clone(),
            topology.clone(),
            cfg.seed,
            cfg.n_train_images,
        )
        .unwrap();
        let prior = build_prior(
            cfg.n_prior,
            &cfg.scene.quadruped,
            &topology,
            &cfg.scene.geometry,
            cfg.seed,
        )
        .unwrap();
        Fixture {
            cfg,
            topology,
            images,
            prior,
        }
    }

    fn logits(tape: &mut Tape<f32>, v: &[f32]) -> Var {
        tape.constant(Tensor::new([v.len()], v.to_vec()))
    }

    #[test]
    fn adversarial_losses_at_zero_logits() {
        let mut tape = Tape::<f64>::new();
        let r = tape.constant(Tensor::zeros(vec![4, 1]));
        let f = tape.constant(Tensor::zeros(vec![4, 1]));
        let d = disc_loss_from_logits(&mut tape, r, f).unwrap();
        let g = generator_adv_loss(&mut tape, f);
        assert!((tape.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((tape.value(g).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adversarial_losses_match_elementwise_reference() {
        let real = [1.5f32, -0.3, 4.0, -7.0];
        let fake = [0.2f32, -2.5, 9.0, 0.0];
        let mut tape = Tape::new();
        let (r, f) = (logits(&mut tape, &real), logits(&mut tape, &fake));
        let d = disc_loss_from_logits(&mut tape, r, f).unwrap();
        let g = generator_adv_loss(&mut tape, f);
        let sig = |x: f32| 1.0 / (1.0 + (-(x as f64)).exp());
        let d_ref = -(real.iter().map(|&x| sig(x).ln()).sum::<f64>() / 4.0
            + fake.iter().map(|&x| (1.0 - sig(x)).ln()).sum::<f64>() / 4.0);
        let g_ref = -fake.iter().map(|&x| sig(x).ln()).sum::<f64>() / 4.0;
        assert!((scalar(&tape, d) - d_ref).abs() < 1e-5);
        assert!((scalar(&tape, g) - g_ref).abs() < 1e-5);
        let short = logits(&mut tape, &[0.0; 3]);
        assert!(disc_loss_from_logits(&mut tape, r, short).is_err());
    }

    #[test]
    fn omega_loss_terms() {
        let f = fixture(tiny_config());
        let model = Model::<f32>::new(&f.cfg.network, &f.topology, 0).unwrap();
        let render = f.cfg.scene.render;
        let poses = &f.prior.poses[..2];
        let imgs =
            images_to_tensor::<f32>(&render_batch(poses, &f.topology, &render).unwrap()).unwrap();
        let run = |lambda: f64, s_from_poses: bool| {
            let mut tape = Tape::new();
            let omega = model.omega.bind(&mut tape, false);
            let p = tape.constant(poses_to_tensor(poses));
            let pi = tape.constant(imgs.clone());
            let s = if s_from_poses {
                tape.constant(imgs.clone())
            } else {
                tape.constant(imgs.map(|v| 1.0 - v))
            };
            let t = loss_omega(
                &mut tape,
                &model,
                &omega,
                p,
                pi,
                p,
                s,
                lambda,
                &f.topology,
                &render,
                false,
            )
            .unwrap();
            (
                scalar(&tape, t.prior),
                scalar(&tape, t.render),
                scalar(&tape, t.total),
            )
        };
        // β(y) = s exactly leaves only the prior term
        let (prior, render_term, total) = run(1.0, true);
        assert!(render_term.abs() < 1e-12);
        assert!((total - prior).abs() < 1e-6);
        let (prior, render_term, total) = run(2.0, false);
        assert!(render_term > 0.0);
        assert!((total - (prior + 2.0 * render_term)).abs() < 1e-5);
    }

    #[test]
    fn weights_combine_additively() {
        let w = LossWeights {
            w_d: 1.0,
            w_gc: 1.0,
            w_omega: 1.0,
        };
        assert!((w.combine(0.2, 0.3, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn breakdown_sums_and_lifter_gradient_vanishes_without_gc() {
        let f = fixture(tiny_config());
        let model = Model::<f32>::new(&f.cfg.network, &f.topology, 1).unwrap();
        let batch = make_batch(0, &f.cfg, &f.images, &f.prior, &f.topology).unwrap();
        let (total, b, _) = total_loss(&model, &batch, &f.cfg, &f.topology, 0).unwrap();
        let recomputed = f.cfg.w_d * b.g_adv
            + f.cfg.w_gc * (b.loss_2d + b.loss_3d + b.loss_r3d)
            + f.cfg.w_omega * (b.omega_prior + f.cfg.lambda * b.omega_render);
        assert!((total - recomputed).abs() < 1e-10);

        let cfg = TrainConfig {
            w_gc: 0.0,
            ..f.cfg.clone()
        };
        let (_, _, grads) = total_loss(&model, &batch, &cfg, &f.topology, 0).unwrap();
        for g in grads[2].iter().flatten() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
        assert!(grads[0]
            .iter()
            .flatten()
            .any(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let f = fixture(tiny_config());
        let cfg = TrainConfig {
            lr_generator: 0.0,
            lr_discriminator: 0.0,
            ..f.cfg.clone()
        };
        let mut state = TrainState::new(&cfg, &f.topology).unwrap();
        let before = state.model.clone();
        let batch = make_batch(0, &cfg, &f.images, &f.prior, &f.topology).unwrap();
        train_step(&mut state, &batch, &cfg, &f.topology).unwrap();
        assert_eq!(state.model, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn updates_touch_only_their_own_group() {
        let f = fixture(tiny_config());
        let gen_frozen = TrainConfig {
            lr_generator: 0.0,
            ..f.cfg.clone()
        };
        let mut state = TrainState::new(&gen_frozen, &f.topology).unwrap();
        let before = state.model.clone();
        let batch = make_batch(0, &gen_frozen, &f.images, &f.prior, &f.topology).unwrap();
        train_step(&mut state, &batch, &gen_frozen, &f.topology).unwrap();
        for g in Group::GENERATOR {
            assert_eq!(state.model.checksum(g), before.checksum(g));
        }
        assert_ne!(
            state.model.checksum(Group::Disc),
            before.checksum(Group::Disc)
        );

        let disc_frozen = TrainConfig {
            lr_discriminator: 0.0,
            ..f.cfg.clone()
        };
        let mut state = TrainState::new(&disc_frozen, &f.topology).unwrap();
        train_step(&mut state, &batch, &disc_frozen, &f.topology).unwrap();
        assert_eq!(
            state.model.checksum(Group::Disc),
            before.checksum(Group::Disc)
        );
        assert_ne!(
            state.model.checksum(Group::Phi),
            before.checksum(Group::Phi)
        );
    }

    #[test]
    fn warmup_moves_only_omega() {
        let f = fixture(TrainConfig {
            omega_warmup_steps: 1,
            ..tiny_config()
        });
        let mut state = TrainState::new(&f.cfg, &f.topology).unwrap();
        let before = state.model.clone();
        let batch = make_batch(0, &f.cfg, &f.images, &f.prior, &f.topology).unwrap();
        let b = train_step(&mut state, &batch, &f.cfg, &f.topology).unwrap();
        for g in [Group::Phi, Group::Lifter, Group::Disc] {
            assert_eq!(state.model.checksum(g), before.checksum(g));
        }
        assert_ne!(
            state.model.checksum(Group::Omega),
            before.checksum(Group::Omega)
        );
        assert_eq!((b.g_adv, b.loss_gc, b.omega_render), (0.0, 0.0, 0.0));
        assert!(b.omega_prior > 0.0 && b.total == b.omega_prior);

        let after = state.model.clone();
        train_step(&mut state, &batch, &f.cfg, &f.topology).unwrap();
        assert_ne!(state.model.checksum(Group::Phi), after.checksum(Group::Phi));
        assert_ne!(
            state.model.checksum(Group::Disc),
            after.checksum(Group::Disc)
        );
    }

    #[test]
    fn small_batches_are_rejected() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::InsufficientBatch(1))));
        let cfg = TrainConfig {
            lambda: 0.0,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = tiny_config();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("seed = 7\nsteps = 3\n").unwrap();
        assert_eq!((partial.seed, partial.steps, partial.batch_size), (7, 3, 8));
        assert!(matches!(
            TrainConfig::from_toml("schema_version = 9"),
            Err(Error::UnknownSchemaVersion { .. })
        ));
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let f = fixture(tiny_config());
        let data = TrainData {
            images: &f.images,
            prior: &f.prior,
            validation: &[],
        };
        let dir = tempfile::tempdir().unwrap();
        let full = fit(&f.cfg, &data, &f.topology, &dir.path().join("full"), None).unwrap();
        let half_cfg = TrainConfig {
            steps: 2,
            ..f.cfg.clone()
        };
        let part = dir.path().join("part");
        let first = fit(&half_cfg, &data, &f.topology, &part, None).unwrap();
        let resumed = fit(&f.cfg, &data, &f.topology, &part, Some(&first.checkpoint)).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(
            read_metrics(&resumed.metrics).unwrap(),
            read_metrics(&full.metrics).unwrap()
        );
        assert!(checkpoint_path(&part, 2).exists());

        let zero = TrainConfig {
            steps: 0,
            ..f.cfg.clone()
        };
        let init = fit(&zero, &data, &f.topology, &dir.path().join("zero"), None).unwrap();
        assert_eq!(
            init.state.model,
            TrainState::new(&zero, &f.topology).unwrap().model
        );
    }
}
