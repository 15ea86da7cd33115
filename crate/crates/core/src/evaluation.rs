//! PCK for 2D predictions, MPJPE and Procrustes-aligned MPJPE for 3D, and
//! inference through Φ, Ω and Λ.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::geometry::{lift, GeometryConfig};
use crate::networks::Model;
use crate::skeleton::{Pose2D, Pose3D, SkeletonTopology};
use crate::synthetic::EvalScene;
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Longer side of the tight bounding box of `gt`.
pub fn norm_length(gt: &Pose2D) -> f64 {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for c in gt.coords() {
        for k in 0..2 {
            lo[k] = lo[k].min(c[k]);
            hi[k] = hi[k].max(c[k]);
        }
    }
    (hi[0] - lo[0]).max(hi[1] - lo[1])
}

/// Joint `i` is correct iff `|pred_i - gt_i| <= alpha * norm_length`.
pub fn pck(pred: &Pose2D, gt: &Pose2D, alpha: f64, norm_length: f64) -> Result<Vec<bool>> {
    if !(norm_length > 0.0) {
        return Err(Error::Config(format!(
            "normalization length must be positive, got {norm_length}"
        )));
    }
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::SchemaMismatch {
            expected: gt.num_joints(),
            actual: pred.num_joints(),
        });
    }
    let limit = alpha * norm_length;
    Ok(pred
        .coords()
        .iter()
        .zip(gt.coords())
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]) <= limit)
        .collect())
}

/// Report columns, in table order.
pub const GROUPS: [&str; 5] = ["Eyes", "Chin", "Shoulders", "Knees", "Hooves"];

/// Column of a joint, from its name. Hips count as shoulders and hocks as
/// knees.
pub fn joint_group(name: &str) -> Option<usize> {
    let n = name.to_ascii_lowercase();
    if n.contains("eye") {
        Some(0)
    } else if n.contains("chin") {
        Some(1)
    } else if n.contains("shoulder") || n.contains("hip") {
        Some(2)
    } else if n.contains("knee") || n.contains("hock") {
        Some(3)
    } else if n.contains("hoof") || n.contains("hooves") {
        Some(4)
    } else {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub alpha: f64,
    pub samples: usize,
    pub joint_names: Vec<String>,
    /// Percentages in `[0, 100]`, one per joint.
    pub per_joint: Vec<f64>,
    /// `(column, percentage)` in [`GROUPS`] order; columns without joints
    /// are left out.
    pub groups: Vec<(String, f64)>,
    pub mean: f64,
    /// Normalization length used for each sample.
    pub norm_lengths: Vec<f64>,
}

/// A published table row: group percentages and the mean as printed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedRow {
    pub groups: [f64; 5],
    pub mean: f64,
}

/// Weizmann horses, self-supervised with a synthetic prior.
pub const PUBLISHED_ROW: PublishedRow = PublishedRow {
    groups: [49.3, 58.3, 34.2, 44.7, 31.2],
    mean: 43.50,
};

pub fn pck_report(
    preds: &[Pose2D],
    gts: &[Pose2D],
    alpha: f64,
    joint_names: &[String],
) -> Result<PckReport> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Config("cannot report PCK on zero samples".into()));
    }
    let j = joint_names.len();
    let mut hits = vec![0usize; j];
    let mut norm_lengths = Vec::with_capacity(gts.len());
    for (p, g) in preds.iter().zip(gts) {
        if g.num_joints() != j {
            return Err(Error::SchemaMismatch {
                expected: j,
                actual: g.num_joints(),
            });
        }
        let n = norm_length(g);
        norm_lengths.push(n);
        for (h, ok) in hits.iter_mut().zip(pck(p, g, alpha, n)?) {
            *h += ok as usize;
        }
    }
    let per_joint: Vec<f64> = hits
        .iter()
        .map(|&h| 100.0 * h as f64 / preds.len() as f64)
        .collect();
    let mut sums = [(0.0, 0usize); 5];
    for (name, &rate) in joint_names.iter().zip(&per_joint) {
        if let Some(g) = joint_group(name) {
            sums[g].0 += rate;
            sums[g].1 += 1;
        }
    }
    let groups = GROUPS
        .iter()
        .zip(sums)
        .filter(|(_, (_, n))| *n > 0)
        .map(|(name, (s, n))| (name.to_string(), s / n as f64))
        .collect();
    Ok(PckReport {
        alpha,
        samples: preds.len(),
        joint_names: joint_names.to_vec(),
        mean: per_joint.iter().sum::<f64>() / j as f64,
        per_joint,
        groups,
        norm_lengths,
    })
}

impl PckReport {
    /// Report holding only the group columns and mean of a published row.
    pub fn from_published_row(row: &PublishedRow, alpha: f64) -> Self {
        Self {
            alpha,
            samples: 0,
            joint_names: Vec::new(),
            per_joint: Vec::new(),
            groups: GROUPS
                .iter()
                .zip(row.groups)
                .map(|(n, v)| (n.to_string(), v))
                .collect(),
            mean: row.mean,
            norm_lengths: Vec::new(),
        }
    }

    pub fn group(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// Aligned plain-text table with one row labelled `label`.
    pub fn to_table(&self, label: &str) -> String {
        let width = label.len().max(6);
        let mut out = format!("PCK@{}\n{:<width$}", self.alpha, "Method");
        for g in GROUPS {
            let _ = write!(out, " {g:>9}");
        }
        let _ = writeln!(out, " {:>9}", "Mean");
        let _ = write!(out, "{label:<width$}");
        for g in GROUPS {
            match self.group(g) {
                Some(v) => {
                    let _ = write!(out, " {v:>9.1}");
                }
                None => {
                    let _ = write!(out, " {:>9}", "-");
                }
            }
        }
        let _ = writeln!(out, " {:>9.2}", self.mean);
        out
    }
}

pub fn mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::SchemaMismatch {
            expected: gt.num_joints(),
            actual: pred.num_joints(),
        });
    }
    Ok(point_error(pred.coords(), gt.coords()))
}

fn centroid(c: &[[f64; 3]]) -> Vector3<f64> {
    c.iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .sum::<Vector3<f64>>()
        / c.len() as f64
}

/// Least-squares similarity alignment of `pred` onto `gt` (rotation, uniform
/// scale, translation).
pub fn procrustes_align(pred: &Pose3D, gt: &Pose3D) -> Result<Pose3D> {
    Pose3D::new(align_points(pred, gt)?)
}

fn align_points(pred: &Pose3D, gt: &Pose3D) -> Result<Vec<[f64; 3]>> {
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::SchemaMismatch {
            expected: gt.num_joints(),
            actual: pred.num_joints(),
        });
    }
    let (mp, mg) = (centroid(pred.coords()), centroid(gt.coords()));
    let xs: Vec<Vector3<f64>> = pred
        .coords()
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]) - mp)
        .collect();
    let ys: Vec<Vector3<f64>> = gt
        .coords()
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]) - mg)
        .collect();
    let gt_spread: f64 = ys.iter().map(|y| y.norm_squared()).sum();
    if gt_spread < 1e-24 {
        return Err(Error::DegenerateAlignment);
    }
    let pred_spread: f64 = xs.iter().map(|x| x.norm_squared()).sum();
    let to_pose = |pts: Vec<Vector3<f64>>| Ok(pts.iter().map(|p| [p.x, p.y, p.z]).collect());
    if pred_spread < 1e-24 {
        return to_pose(vec![mg; xs.len()]);
    }
    let h: Matrix3<f64> = xs.iter().zip(&ys).map(|(x, y)| y * x.transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sign = (u * v_t).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = u * d * v_t;
    let s = (svd.singular_values.x + svd.singular_values.y + sign * svd.singular_values.z)
        / pred_spread;
    to_pose(xs.iter().map(|x| s * (r * x) + mg).collect())
}

pub fn pa_mpjpe(pred: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let aligned = align_points(pred, gt)?;
    Ok(point_error(&aligned, gt.coords()))
}

fn point_error(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, g)| {
            ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2) + (p[2] - g[2]).powi(2)).sqrt()
        })
        .sum();
    total / b.len() as f64
}

/// Inference output for a batch of images.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub skeleton_images: Vec<Vec<f64>>,
    pub poses2d: Vec<Pose2D>,
    pub depth_offsets: Vec<Vec<f64>>,
    pub poses3d: Vec<Pose3D>,
}

/// Runs Φ, Ω and Λ on `[B, C, N, N]` images. The discriminator and the
/// rotation loop play no part.
pub fn predict(
    model: &Model<f32>,
    topology: &SkeletonTopology,
    geometry: &GeometryConfig,
    images: &Tensor<f32>,
) -> Result<Prediction> {
    if model.topology_hash != topology.hash() {
        return Err(Error::TopologyMismatch {
            checkpoint: model.topology_hash.clone(),
            expected: topology.hash(),
        });
    }
    let mut tape = Tape::new();
    let (phi, omega) = (
        model.phi.bind(&mut tape, false),
        model.omega.bind(&mut tape, false),
    );
    let lifter = model.lifter.bind(&mut tape, false);
    let x = tape.constant(images.clone());
    let s = model.phi_forward(&mut tape, &phi, x)?;
    let y = model.omega_forward(&mut tape, &omega, s)?;
    let d = model.lifter_forward::<rand_chacha::ChaCha8Rng>(&mut tape, &lifter, y, None)?;
    let b = images.dim(0);
    let (j, plane) = (model.num_joints, tape.value(s).len() / b);
    let (sv, yv, dv) = (
        tape.value(s).to_f64_vec(),
        tape.value(y).to_f64_vec(),
        tape.value(d).to_f64_vec(),
    );
    let mut out = Prediction {
        skeleton_images: Vec::with_capacity(b),
        poses2d: Vec::with_capacity(b),
        depth_offsets: Vec::with_capacity(b),
        poses3d: Vec::with_capacity(b),
    };
    for i in 0..b {
        let y = Pose2D::from_flat(&yv[i * j * 2..(i + 1) * j * 2])?;
        let d = dv[i * j..(i + 1) * j].to_vec();
        out.poses3d
            .push(lift(&y, &d, geometry.delta, geometry.z_min)?);
        out.poses2d.push(y);
        out.depth_offsets.push(d);
        out.skeleton_images
            .push(sv[i * plane..(i + 1) * plane].to_vec());
    }
    Ok(out)
}

/// [`predict`] over many images in chunks of `batch`; results do not depend
/// on the chunk size.
pub fn predict_pixels(
    model: &Model<f32>,
    topology: &SkeletonTopology,
    geometry: &GeometryConfig,
    images: &[&[f64]],
    batch: usize,
) -> Result<Prediction> {
    let n = model.config.image_size;
    let c = model.config.in_channels;
    let mut all = Prediction {
        skeleton_images: Vec::new(),
        poses2d: Vec::new(),
        depth_offsets: Vec::new(),
        poses3d: Vec::new(),
    };
    for chunk in images.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * c * n * n);
        for img in chunk {
            if img.len() != c * n * n {
                return Err(Error::Shape(format!(
                    "image has {} values, expected {}",
                    img.len(),
                    c * n * n
                )));
            }
            data.extend(img.iter().map(|&v| v as f32));
        }
        let p = predict(
            model,
            topology,
            geometry,
            &Tensor::new([chunk.len(), c, n, n], data),
        )?;
        all.skeleton_images.extend(p.skeleton_images);
        all.poses2d.extend(p.poses2d);
        all.depth_offsets.extend(p.depth_offsets);
        all.poses3d.extend(p.poses3d);
    }
    Ok(all)
}

/// 2D and 3D metrics of a model on held-out scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub pck: PckReport,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    /// PA-MPJPE of the predicted 2D poses lifted with zero depth.
    pub planar_pa_mpjpe: f64,
}

pub fn evaluate_scenes(
    model: &Model<f32>,
    scenes: &[EvalScene],
    topology: &SkeletonTopology,
    geometry: &GeometryConfig,
    alpha: f64,
) -> Result<SceneMetrics> {
    if scenes.is_empty() {
        return Err(Error::Config("no evaluation scenes".into()));
    }
    let pixels: Vec<&[f64]> = scenes.iter().map(|s| s.image.pixels()).collect();
    let pred = predict_pixels(model, topology, geometry, &pixels, 16)?;
    let sub = |p: &Pose2D| p.subset(topology);
    let preds = pred.poses2d.iter().map(sub).collect::<Result<Vec<_>>>()?;
    let gts = scenes
        .iter()
        .map(|s| sub(&s.gt_pose2d))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = topology
        .eval_joint_names()
        .iter()
        .map(|s| s.to_string())
        .collect();
    let pck = pck_report(&preds, &gts, alpha, &names)?;
    let (mut m, mut pa, mut planar) = (0.0, 0.0, 0.0);
    for ((scene, v), y) in scenes.iter().zip(&pred.poses3d).zip(&pred.poses2d) {
        let gt = scene.camera_pose3d(geometry)?;
        m += mpjpe(v, &gt)?;
        pa += pa_mpjpe(v, &gt)?;
        let flat = lift(
            y,
            &vec![0.0; y.num_joints()],
            geometry.delta,
            geometry.z_min,
        )?;
        planar += pa_mpjpe(&flat, &gt)?;
    }
    let n = scenes.len() as f64;
    Ok(SceneMetrics {
        pck,
        mpjpe: m / n,
        pa_mpjpe: pa / n,
        planar_pa_mpjpe: planar / n,
    })
}
