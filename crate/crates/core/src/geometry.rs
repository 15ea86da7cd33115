//! Rotation, perspective projection, depth lifting and the
//! geometry-consistency losses.
//!
//! Every operation exists twice: a plain `f64` form on [`Pose2D`]/[`Pose3D`]
//! values, and a tape form on `[B, J, C]` tensors used during training.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, Pose3D, DEFAULT_DELTA};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryConfig {
    /// Constant scene depth; projection is the identity on `z = delta`.
    pub delta: f64,
    /// Joints at or nearer than this depth cannot be projected.
    pub z_min: f64,
    pub azimuth_range: (f64, f64),
    pub elevation_range: (f64, f64),
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            z_min: 0.1,
            azimuth_range: (-PI, PI),
            elevation_range: (-PI / 9.0, PI / 9.0),
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > self.z_min && self.z_min > 0.0) {
            return Err(Error::Config(format!(
                "need delta > z_min > 0, got delta {} z_min {}",
                self.delta, self.z_min
            )));
        }
        check_range("azimuth", self.azimuth_range)?;
        check_range("elevation", self.elevation_range)?;
        if self.azimuth_range.0 < -PI || self.azimuth_range.1 > PI {
            return Err(Error::Config(
                "azimuth range must lie within [-pi, pi]".into(),
            ));
        }
        Ok(())
    }

    /// Rotation pivot: the root-centered position `(0, 0, delta)`.
    pub fn pivot(&self) -> [f64; 3] {
        [0.0, 0.0, self.delta]
    }
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Config(format!("{name} range [{lo}, {hi}] is empty")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub azimuth: f64,
    pub elevation: f64,
}

/// Proper 3x3 rotation, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(pub [[f64; 3]; 3]);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation about the vertical (image `y`) axis.
    pub fn azimuth(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// Rotation about the horizontal (image `x`) axis.
    pub fn elevation(phi: f64) -> Self {
        let (s, c) = phi.sin_cos();
        Self([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    /// `R_elev(phi) * R_azim(theta)`.
    pub fn from_spec(spec: RotationSpec) -> Self {
        Self::elevation(spec.elevation).compose(&Self::azimuth(spec.azimuth))
    }

    /// `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        let (a, b) = (&self.0, &other.0);
        Self(std::array::from_fn(|i| {
            std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum())
        }))
    }

    pub fn transpose(&self) -> Self {
        Self(std::array::from_fn(|i| {
            std::array::from_fn(|j| self.0[j][i])
        }))
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|k| self.0[i][k] * v[k]).sum())
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// `max |R^T R - I|` over entries.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().compose(self);
        let mut worst = 0.0f64;
        for (i, row) in p.0.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }
}

/// Draws azimuth and elevation uniformly from their ranges.
pub fn sample_rotation<R: Rng + ?Sized>(
    rng: &mut R,
    azimuth_range: (f64, f64),
    elevation_range: (f64, f64),
) -> Result<(RotationSpec, RotationMatrix)> {
    check_range("azimuth", azimuth_range)?;
    check_range("elevation", elevation_range)?;
    let spec = RotationSpec {
        azimuth: rng.gen_range(azimuth_range.0..azimuth_range.1),
        elevation: rng.gen_range(elevation_range.0..elevation_range.1),
    };
    Ok((spec, RotationMatrix::from_spec(spec)))
}

/// `R (joint - pivot) + pivot` for every joint.
pub fn rotate(v: &Pose3D, r: &RotationMatrix, pivot: [f64; 3]) -> Result<Pose3D> {
    Pose3D::new(
        v.coords()
            .iter()
            .map(|&p| {
                let q = r.apply([p[0] - pivot[0], p[1] - pivot[1], p[2] - pivot[2]]);
                [q[0] + pivot[0], q[1] + pivot[1], q[2] + pivot[2]]
            })
            .collect(),
    )
}

/// Perspective projection `(x delta / z, y delta / z)`.
pub fn project(v: &Pose3D, delta: f64, z_min: f64) -> Result<Pose2D> {
    let coords = v
        .coords()
        .iter()
        .enumerate()
        .map(|(j, &[x, y, z])| {
            if z <= z_min {
                return Err(Error::DegenerateDepth {
                    joint: j,
                    depth: z,
                    z_min,
                });
            }
            Ok([x * delta / z, y * delta / z])
        })
        .collect::<Result<Vec<_>>>()?;
    Pose2D::new(coords)
}

/// Back-projects `y` to depths `z_i = d_i + delta`.
pub fn lift(y: &Pose2D, depth_offsets: &[f64], delta: f64, z_min: f64) -> Result<Pose3D> {
    if depth_offsets.len() != y.num_joints() {
        return Err(Error::Shape(format!(
            "{} depth offsets for {} joints",
            depth_offsets.len(),
            y.num_joints()
        )));
    }
    let coords = y
        .coords()
        .iter()
        .zip(depth_offsets)
        .enumerate()
        .map(|(j, (&[px, py], &d))| {
            let z = d + delta;
            if !(z > z_min) {
                return Err(Error::DegenerateDepth {
                    joint: j,
                    depth: z,
                    z_min,
                });
            }
            Ok([px * z / delta, py * z / delta, z])
        })
        .collect::<Result<Vec<_>>>()?;
    Pose3D::new(coords)
}

/// The input and the six poses of one rotation/projection loop.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutputs {
    pub y: Pose2D,
    pub v: Pose3D,
    pub v_hat: Pose3D,
    pub y_hat: Pose2D,
    pub v_hat_prime: Pose3D,
    pub v_prime: Pose3D,
    pub y_prime: Pose2D,
}

/// lift, rotate by `r`, project, lift again, rotate back, project.
pub fn consistency_cycle(
    y: &Pose2D,
    lifter: impl Fn(&Pose2D) -> Result<Vec<f64>>,
    r: &RotationMatrix,
    cfg: &GeometryConfig,
) -> Result<CycleOutputs> {
    let pivot = cfg.pivot();
    let v = lift(y, &lifter(y)?, cfg.delta, cfg.z_min)?;
    let v_hat = rotate(&v, r, pivot)?;
    let y_hat = project(&v_hat, cfg.delta, cfg.z_min)?;
    let v_hat_prime = lift(&y_hat, &lifter(&y_hat)?, cfg.delta, cfg.z_min)?;
    let v_prime = rotate(&v_hat_prime, &r.transpose(), pivot)?;
    let y_prime = project(&v_prime, cfg.delta, cfg.z_min)?;
    Ok(CycleOutputs {
        y: y.clone(),
        v,
        v_hat,
        y_hat,
        v_hat_prime,
        v_prime,
        y_prime,
    })
}

fn check_batches<const D: usize>(
    a: &[crate::skeleton::Pose<D>],
    b: &[crate::skeleton::Pose<D>],
) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "batch sizes {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InsufficientBatch(0));
    }
    for (p, q) in a.iter().zip(b) {
        if p.num_joints() != q.num_joints() {
            return Err(Error::Shape(format!(
                "{} vs {} joints",
                p.num_joints(),
                q.num_joints()
            )));
        }
    }
    Ok(())
}

fn mean_sq_frobenius<const D: usize>(
    a: &[crate::skeleton::Pose<D>],
    b: &[crate::skeleton::Pose<D>],
) -> Result<f64> {
    check_batches(a, b)?;
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            p.coords()
                .iter()
                .zip(q.coords())
                .map(|(u, w)| u.iter().zip(w).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
                .sum::<f64>()
        })
        .sum();
    Ok(total / a.len() as f64)
}

/// Batch mean of `||y' - y||^2`.
pub fn loss_2d(y: &[Pose2D], y_prime: &[Pose2D]) -> Result<f64> {
    mean_sq_frobenius(y_prime, y)
}

/// Batch mean of `||v_hat' - v_hat||^2`.
pub fn loss_r3d(v_hat: &[Pose3D], v_hat_prime: &[Pose3D]) -> Result<f64> {
    mean_sq_frobenius(v_hat_prime, v_hat)
}

/// Pairwise deformation `||(v'_j - v'_k) - (v_j - v_k)||^2` averaged over
/// the adjacent pairs `(j, j + 1 mod B)`.
pub fn loss_3d(v: &[Pose3D], v_prime: &[Pose3D]) -> Result<f64> {
    check_batches(v, v_prime)?;
    let b = v.len();
    if b < 2 {
        return Err(Error::InsufficientBatch(b));
    }
    let mut total = 0.0;
    for j in 0..b {
        let k = (j + 1) % b;
        for joint in 0..v[j].num_joints() {
            for c in 0..3 {
                let e = (v_prime[j].joint(joint)[c] - v_prime[k].joint(joint)[c])
                    - (v[j].joint(joint)[c] - v[k].joint(joint)[c]);
                total += e * e;
            }
        }
    }
    Ok(total / b as f64)
}

/// The three geometry-consistency terms of a batch of cycles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcBreakdown {
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub loss_r3d: f64,
}

impl GcBreakdown {
    pub fn total(&self) -> f64 {
        self.loss_2d + self.loss_3d + self.loss_r3d
    }
}

pub fn loss_gc(cycles: &[CycleOutputs]) -> Result<GcBreakdown> {
    let collect3 =
        |f: fn(&CycleOutputs) -> &Pose3D| cycles.iter().map(|c| f(c).clone()).collect::<Vec<_>>();
    let collect2 =
        |f: fn(&CycleOutputs) -> &Pose2D| cycles.iter().map(|c| f(c).clone()).collect::<Vec<_>>();
    Ok(GcBreakdown {
        loss_2d: loss_2d(&collect2(|c| &c.y), &collect2(|c| &c.y_prime))?,
        loss_3d: loss_3d(&collect3(|c| &c.v), &collect3(|c| &c.v_prime))?,
        loss_r3d: loss_r3d(&collect3(|c| &c.v_hat), &collect3(|c| &c.v_hat_prime))?,
    })
}

// ---------------------------------------------------------------------------
// Tape forms. Shapes: 2D poses [B, J, 2], 3D poses [B, J, 3], depths [B, J].

struct LiftOp {
    delta: f64,
}
impl<T: Real> Backward<T> for LiftOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        n: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let inv = T::from_f64_lossy(1.0 / self.delta);
        let delta = T::from_f64_lossy(self.delta);
        let (y, d) = (x[0].data(), x[1].data());
        let gd = g.data();
        let joints = d.len();
        let mut gy = vec![T::zero(); joints * 2];
        let mut gdep = vec![T::zero(); joints];
        for i in 0..joints {
            let z = d[i] + delta;
            let (g0, g1, g2) = (gd[3 * i], gd[3 * i + 1], gd[3 * i + 2]);
            gy[2 * i] = g0 * z * inv;
            gy[2 * i + 1] = g1 * z * inv;
            gdep[i] = (g0 * y[2 * i] + g1 * y[2 * i + 1]) * inv + g2;
        }
        vec![
            n[0].then(|| Tensor::new(x[0].shape().to_vec(), gy)),
            n[1].then(|| Tensor::new(x[1].shape().to_vec(), gdep)),
        ]
    }
}

struct RotateOp {
    rotations: Vec<RotationMatrix>,
}
impl<T: Real> Backward<T> for RotateOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let joints = x[0].dim(1);
        let gd = g.data();
        let mut out = vec![T::zero(); gd.len()];
        for (b, r) in self.rotations.iter().enumerate() {
            let rt = r.transpose();
            for j in 0..joints {
                let o = (b * joints + j) * 3;
                let q = rt.apply([
                    gd[o].to_f64_lossy(),
                    gd[o + 1].to_f64_lossy(),
                    gd[o + 2].to_f64_lossy(),
                ]);
                for c in 0..3 {
                    out[o + c] = T::from_f64_lossy(q[c]);
                }
            }
        }
        vec![Some(Tensor::new(x[0].shape().to_vec(), out))]
    }
}

struct ProjectOp {
    delta: f64,
}
impl<T: Real> Backward<T> for ProjectOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let delta = T::from_f64_lossy(self.delta);
        let v = x[0].data();
        let gd = g.data();
        let joints = v.len() / 3;
        let mut out = vec![T::zero(); v.len()];
        for i in 0..joints {
            let (px, py, z) = (v[3 * i], v[3 * i + 1], v[3 * i + 2]);
            let (g0, g1) = (gd[2 * i], gd[2 * i + 1]);
            let s = delta / z;
            out[3 * i] = g0 * s;
            out[3 * i + 1] = g1 * s;
            out[3 * i + 2] = -(g0 * px + g1 * py) * s / z;
        }
        vec![Some(Tensor::new(x[0].shape().to_vec(), out))]
    }
}

/// `y: [B, J, 2]`, `d: [B, J]` to `v: [B, J, 3]`.
pub fn lift_on_tape<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    d: Var,
    delta: f64,
    z_min: f64,
) -> Result<Var> {
    let (sy, sd) = (tape.shape(y).to_vec(), tape.shape(d).to_vec());
    if sy.len() != 3 || sy[2] != 2 || sd != sy[..2] {
        return Err(Error::Shape(format!(
            "lift expects [B, J, 2] and [B, J], got {sy:?} and {sd:?}"
        )));
    }
    let yv = tape.value(y).data();
    let dv = tape.value(d).data();
    let mut out = Vec::with_capacity(dv.len() * 3);
    for (i, &dd) in dv.iter().enumerate() {
        let z = dd.to_f64_lossy() + delta;
        if !(z > z_min) {
            return Err(Error::DegenerateDepth {
                joint: i % sy[1],
                depth: z,
                z_min,
            });
        }
        let zt = T::from_f64_lossy(z);
        let inv = T::from_f64_lossy(1.0 / delta);
        out.push(yv[2 * i] * zt * inv);
        out.push(yv[2 * i + 1] * zt * inv);
        out.push(zt);
    }
    let v = Tensor::new([sy[0], sy[1], 3], out);
    Ok(tape.push_op(v, &[y, d], LiftOp { delta }))
}

/// Rotates each batch element by its own matrix about `pivot`.
pub fn rotate_on_tape<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    rotations: &[RotationMatrix],
    pivot: [f64; 3],
) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 || s[2] != 3 || s[0] != rotations.len() {
        return Err(Error::Shape(format!(
            "rotate expects [{}, J, 3], got {s:?}",
            rotations.len()
        )));
    }
    let src = tape.value(v).data();
    let mut out = Vec::with_capacity(src.len());
    for (b, r) in rotations.iter().enumerate() {
        for j in 0..s[1] {
            let o = (b * s[1] + j) * 3;
            let p = [
                src[o].to_f64_lossy() - pivot[0],
                src[o + 1].to_f64_lossy() - pivot[1],
                src[o + 2].to_f64_lossy() - pivot[2],
            ];
            let q = r.apply(p);
            out.extend((0..3).map(|c| T::from_f64_lossy(q[c] + pivot[c])));
        }
    }
    let value = Tensor::new(s, out);
    Ok(tape.push_op(
        value,
        &[v],
        RotateOp {
            rotations: rotations.to_vec(),
        },
    ))
}

pub fn project_on_tape<T: Real>(tape: &mut Tape<T>, v: Var, delta: f64, z_min: f64) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!(
            "project expects [B, J, 3], got {s:?}"
        )));
    }
    let src = tape.value(v).data();
    let dt = T::from_f64_lossy(delta);
    let mut out = Vec::with_capacity(src.len() / 3 * 2);
    for (i, p) in src.chunks_exact(3).enumerate() {
        if p[2].to_f64_lossy() <= z_min {
            return Err(Error::DegenerateDepth {
                joint: i % s[1],
                depth: p[2].to_f64_lossy(),
                z_min,
            });
        }
        out.push(p[0] * dt / p[2]);
        out.push(p[1] * dt / p[2]);
    }
    let value = Tensor::new([s[0], s[1], 2], out);
    Ok(tape.push_op(value, &[v], ProjectOp { delta }))
}

/// Batch mean of the squared Frobenius norm of `a - b`.
pub fn mean_sq_error_on_tape<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let batch = tape.shape(a)[0];
    let d = tape.sub(a, b);
    let s = tape.sum_sq(d);
    Ok(tape.scale(s, 1.0 / batch as f64))
}

/// Tape form of [`loss_3d`].
pub fn pairwise_deformation_on_tape<T: Real>(
    tape: &mut Tape<T>,
    v: Var,
    v_prime: Var,
) -> Result<Var> {
    if tape.shape(v) != tape.shape(v_prime) {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            tape.shape(v),
            tape.shape(v_prime)
        )));
    }
    let batch = tape.shape(v)[0];
    if batch < 2 {
        return Err(Error::InsufficientBatch(batch));
    }
    let diff = tape.sub(v_prime, v);
    let next = tape.batch_roll(diff, 1);
    let dd = tape.sub(diff, next);
    let s = tape.sum_sq(dd);
    Ok(tape.scale(s, 1.0 / batch as f64))
}

/// Tape nodes of one batched consistency cycle plus its three losses.
#[derive(Clone, Copy, Debug)]
pub struct CycleVars {
    pub v: Var,
    pub v_hat: Var,
    pub y_hat: Var,
    pub v_hat_prime: Var,
    pub v_prime: Var,
    pub y_prime: Var,
    pub loss_2d: Var,
    pub loss_3d: Var,
    pub loss_r3d: Var,
    pub loss_gc: Var,
}

/// Batched cycle. `lifter` maps a `[B, J, 2]` node to `[B, J]` depth offsets.
pub fn cycle_on_tape<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    mut lifter: impl FnMut(&mut Tape<T>, Var) -> Result<Var>,
    rotations: &[RotationMatrix],
    cfg: &GeometryConfig,
) -> Result<CycleVars> {
    let pivot = cfg.pivot();
    let inverse: Vec<RotationMatrix> = rotations.iter().map(RotationMatrix::transpose).collect();
    let d = lifter(tape, y)?;
    let v = lift_on_tape(tape, y, d, cfg.delta, cfg.z_min)?;
    let v_hat = rotate_on_tape(tape, v, rotations, pivot)?;
    let y_hat = project_on_tape(tape, v_hat, cfg.delta, cfg.z_min)?;
    let d_hat = lifter(tape, y_hat)?;
    let v_hat_prime = lift_on_tape(tape, y_hat, d_hat, cfg.delta, cfg.z_min)?;
    let v_prime = rotate_on_tape(tape, v_hat_prime, &inverse, pivot)?;
    let y_prime = project_on_tape(tape, v_prime, cfg.delta, cfg.z_min)?;
    let loss_2d = mean_sq_error_on_tape(tape, y_prime, y)?;
    let loss_3d = pairwise_deformation_on_tape(tape, v, v_prime)?;
    let loss_r3d = mean_sq_error_on_tape(tape, v_hat_prime, v_hat)?;
    let partial = tape.add(loss_2d, loss_3d);
    let loss_gc = tape.add(partial, loss_r3d);
    Ok(CycleVars {
        v,
        v_hat,
        y_hat,
        v_hat_prime,
        v_prime,
        y_prime,
        loss_2d,
        loss_3d,
        loss_r3d,
        loss_gc,
    })
}

/// Packs poses into a `[B, J, D]` tensor.
pub fn poses_to_tensor<T: Real, const D: usize>(poses: &[crate::skeleton::Pose<D>]) -> Tensor<T> {
    let j = poses.first().map_or(0, |p| p.num_joints());
    let data: Vec<f64> = poses.iter().flat_map(|p| p.flat()).collect();
    Tensor::from_f64([poses.len(), j, D], &data)
}

/// Splits a `[B, J, D]` tensor into poses.
pub fn tensor_to_poses<T: Real, const D: usize>(
    t: &Tensor<T>,
) -> Result<Vec<crate::skeleton::Pose<D>>> {
    let s = t.shape();
    if s.len() != 3 || s[2] != D {
        return Err(Error::Shape(format!("expected [B, J, {D}], got {s:?}")));
    }
    let flat = t.to_f64_vec();
    flat.chunks_exact(s[1] * D)
        .map(crate::skeleton::Pose::<D>::from_flat)
        .collect()
}
