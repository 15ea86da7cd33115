//! Procedural quadruped: forward kinematics with a sinusoidal gait, the
//! unpaired 2D pose prior, training images and held-out evaluation scenes.
//!
//! Body frame: `x` forward, `y` down, `z` towards the animal's left. The root
//! (withers) sits at `(0, 0, delta)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project, rotate, sample_rotation, GeometryConfig, RotationMatrix, RotationSpec,
};
use crate::renderer::{render, RenderConfig, SkeletonImage};
use crate::rng::{stream_rng, Stream};
use crate::skeleton::{Pose2D, Pose3D, PoseFile, SkeletonTopology};

pub const ANGLE_NAMES: [&str; 12] = [
    "back_pitch",
    "neck_pitch",
    "head_pitch",
    "tail_pitch",
    "front_left_swing",
    "front_left_flex",
    "front_right_swing",
    "front_right_flex",
    "rear_left_swing",
    "rear_left_flex",
    "rear_right_swing",
    "rear_right_flex",
];

const BACK: usize = 0;
const NECK: usize = 1;
const HEAD: usize = 2;
const TAIL: usize = 3;
/// Swing angle index of each leg in FL, FR, RL, RR order; flex is `+ 1`.
const LEG_SWING: [usize; 4] = [4, 6, 8, 10];

/// Deviations from the rest pose, indexed like [`ANGLE_NAMES`].
pub type JointAngles = [f64; 12];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLengths {
    pub back: f64,
    pub croup: f64,
    pub tail: f64,
    pub neck: f64,
    pub head: f64,
    pub eye: f64,
    pub shoulder: f64,
    pub front_upper: f64,
    pub front_lower: f64,
    pub hip: f64,
    pub rear_upper: f64,
    pub rear_lower: f64,
}

impl Default for SegmentLengths {
    fn default() -> Self {
        Self {
            back: 0.40,
            croup: 0.10,
            tail: 0.26,
            neck: 0.30,
            head: 0.26,
            eye: 0.10,
            shoulder: 0.15,
            front_upper: 0.24,
            front_lower: 0.24,
            hip: 0.14,
            rear_upper: 0.24,
            rear_lower: 0.26,
        }
    }
}

/// One joint angle: a gait term `amplitude * g(phase + offset)` (with `g`
/// either `sin` or `max(0, sin)`) plus uniform jitter, bounded by `range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Articulation {
    pub range: (f64, f64),
    pub gait_amplitude: f64,
    pub gait_offset: f64,
    pub rectified: bool,
    pub jitter: f64,
}

impl Articulation {
    fn gait(&self, phase: f64) -> f64 {
        let s = (phase + self.gait_offset).sin();
        self.gait_amplitude * if self.rectified { s.max(0.0) } else { s }
    }

    /// Extremes reachable by gait plus jitter.
    fn reach(&self) -> (f64, f64) {
        let lo = if self.rectified {
            0.0
        } else {
            -self.gait_amplitude.abs()
        };
        (lo - self.jitter, self.gait_amplitude.abs() + self.jitter)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadrupedParams {
    pub lengths: SegmentLengths,
    pub articulations: [Articulation; 12],
}

impl Default for QuadrupedParams {
    fn default() -> Self {
        let axial = |range: f64, amp: f64, jitter: f64| Articulation {
            range: (-range, range),
            gait_amplitude: amp,
            gait_offset: 0.0,
            rectified: false,
            jitter,
        };
        let swing = |offset: f64| Articulation {
            range: (-0.8, 0.8),
            gait_amplitude: 0.4,
            gait_offset: offset,
            rectified: false,
            jitter: 0.15,
        };
        let flex = |offset: f64| Articulation {
            range: (-0.2, 1.2),
            gait_amplitude: 0.8,
            gait_offset: offset + FRAC_PI_2,
            rectified: true,
            jitter: 0.15,
        };
        // trot: diagonal pairs (FL, RR) and (FR, RL) move together
        Self {
            lengths: SegmentLengths::default(),
            articulations: [
                axial(0.2, 0.03, 0.05),
                axial(0.6, 0.1, 0.35),
                axial(0.6, 0.05, 0.35),
                axial(0.8, 0.1, 0.5),
                swing(0.0),
                flex(0.0),
                swing(PI),
                flex(PI),
                swing(PI),
                flex(PI),
                swing(0.0),
                flex(0.0),
            ],
        }
    }
}

impl QuadrupedParams {
    pub fn validate(&self) -> Result<()> {
        let l = &self.lengths;
        let all = [
            l.back,
            l.croup,
            l.tail,
            l.neck,
            l.head,
            l.eye,
            l.shoulder,
            l.front_upper,
            l.front_lower,
            l.hip,
            l.rear_upper,
            l.rear_lower,
        ];
        if all.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("segment lengths must be positive".into()));
        }
        for (name, a) in ANGLE_NAMES.iter().zip(&self.articulations) {
            let (lo, hi) = a.reach();
            if !(a.range.0 <= lo && hi <= a.range.1) {
                return Err(Error::Config(format!(
                    "angle {name} can reach [{lo:.3}, {hi:.3}], outside its range [{:.3}, {:.3}]",
                    a.range.0, a.range.1
                )));
            }
        }
        Ok(())
    }

    /// Gait-only angles at `phase`.
    pub fn gait_angles(&self, phase: f64) -> JointAngles {
        std::array::from_fn(|i| self.articulations[i].gait(phase))
    }

    pub fn check_angles(&self, angles: &JointAngles) -> Result<()> {
        for ((name, a), &v) in ANGLE_NAMES.iter().zip(&self.articulations).zip(angles) {
            if !(a.range.0..=a.range.1).contains(&v) {
                return Err(Error::Config(format!(
                    "angle {name} = {v:.4} outside [{:.3}, {:.3}]",
                    a.range.0, a.range.1
                )));
            }
        }
        Ok(())
    }

    /// Length of the bone ending at `child`.
    pub fn bone_length(&self, child: &str) -> Option<f64> {
        let l = &self.lengths;
        Some(match child {
            "neck" => l.neck,
            "chin" => l.head,
            "left_eye" | "right_eye" => l.eye,
            "back" => l.back,
            "tail_base" => l.croup,
            "tail_tip" => l.tail,
            "front_left_shoulder" | "front_right_shoulder" => l.shoulder,
            "front_left_knee" | "front_right_knee" => l.front_upper,
            "front_left_hoof" | "front_right_hoof" => l.front_lower,
            "rear_left_hip" | "rear_right_hip" => l.hip,
            "rear_left_hock" | "rear_right_hock" => l.rear_upper,
            "rear_left_hoof" | "rear_right_hoof" => l.rear_lower,
            _ => return None,
        })
    }
}

// rest-pose angles the deviations are added to
const REST_CROUP: f64 = 0.2;
const REST_TAIL: f64 = 1.1;
const REST_NECK: f64 = 0.9;
const REST_HEAD: f64 = 0.8;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn step(from: [f64; 3], length: f64, dir: [f64; 3]) -> [f64; 3] {
    [
        from[0] + length * dir[0],
        from[1] + length * dir[1],
        from[2] + length * dir[2],
    ]
}

/// Forward kinematics from joint-angle deviations.
pub fn forward_kinematics(
    params: &QuadrupedParams,
    angles: &JointAngles,
    topology: &SkeletonTopology,
    delta: f64,
) -> Result<Pose3D> {
    params.check_angles(angles)?;
    let l = &params.lengths;
    let mut joints: Vec<(&str, [f64; 3])> = Vec::with_capacity(20);
    let withers = [0.0, 0.0, 0.0];
    joints.push(("withers", withers));

    let b = angles[BACK];
    let back = step(withers, l.back, [-b.cos(), b.sin(), 0.0]);
    let croup_angle = REST_CROUP + b;
    let tail_base = step(back, l.croup, [-croup_angle.cos(), croup_angle.sin(), 0.0]);
    let t = REST_TAIL + angles[TAIL];
    let tail_tip = step(tail_base, l.tail, [-t.cos(), t.sin(), 0.0]);
    joints.extend([
        ("back", back),
        ("tail_base", tail_base),
        ("tail_tip", tail_tip),
    ]);

    let n = REST_NECK + angles[NECK];
    let neck = step(withers, l.neck, [n.cos(), -n.sin(), 0.0]);
    let h = REST_HEAD + angles[HEAD];
    let head_dir = [h.cos(), h.sin(), 0.0];
    let chin = step(neck, l.head, head_dir);
    let eye_dir = |side: f64| unit([-0.8 * head_dir[0], -0.8 * head_dir[1] - 0.6, 0.5 * side]);
    joints.extend([
        ("neck", neck),
        ("chin", chin),
        ("left_eye", step(chin, l.eye, eye_dir(1.0))),
        ("right_eye", step(chin, l.eye, eye_dir(-1.0))),
    ]);

    let legs = [
        (
            ["front_left_shoulder", "front_left_knee", "front_left_hoof"],
            1.0,
            true,
        ),
        (
            [
                "front_right_shoulder",
                "front_right_knee",
                "front_right_hoof",
            ],
            -1.0,
            true,
        ),
        (
            ["rear_left_hip", "rear_left_hock", "rear_left_hoof"],
            1.0,
            false,
        ),
        (
            ["rear_right_hip", "rear_right_hock", "rear_right_hoof"],
            -1.0,
            false,
        ),
    ];
    for (leg, &(names, side, front)) in legs.iter().enumerate() {
        let swing = angles[LEG_SWING[leg]];
        let flex = angles[LEG_SWING[leg] + 1];
        let (top_len, upper_len, lower_len, anchor, lean, bend) = if front {
            (
                l.shoulder,
                l.front_upper,
                l.front_lower,
                withers,
                0.1,
                -flex,
            )
        } else {
            (l.hip, l.rear_upper, l.rear_lower, back, -0.1, flex)
        };
        let top = step(anchor, top_len, unit([lean, 1.0, 0.5 * side]));
        let mid = step(top, upper_len, [swing.sin(), swing.cos(), 0.0]);
        let lower = swing + bend;
        let hoof = step(mid, lower_len, [lower.sin(), lower.cos(), 0.0]);
        joints.extend([(names[0], top), (names[1], mid), (names[2], hoof)]);
    }

    let mut coords = vec![[0.0; 3]; topology.num_joints()];
    let mut filled = vec![false; topology.num_joints()];
    for (name, p) in joints {
        let idx = topology
            .joint_index(name)
            .ok_or_else(|| Error::MissingJoint(name.to_string()))?;
        coords[idx] = [p[0], p[1], p[2] + delta];
        filled[idx] = true;
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        return Err(Error::Config(format!(
            "procedural quadruped does not define joint {}",
            topology.joint_names()[missing]
        )));
    }
    Pose3D::new(coords)
}

/// Random gait phase plus per-angle jitter.
pub fn sample_angles<R: Rng + ?Sized>(params: &QuadrupedParams, rng: &mut R) -> (f64, JointAngles) {
    let phase = rng.gen_range(0.0..2.0 * PI);
    let mut angles = params.gait_angles(phase);
    for (a, art) in angles.iter_mut().zip(&params.articulations) {
        if art.jitter > 0.0 {
            *a += rng.gen_range(-art.jitter..art.jitter);
        }
    }
    (phase, angles)
}

pub fn sample_pose3d<R: Rng + ?Sized>(
    params: &QuadrupedParams,
    topology: &SkeletonTopology,
    delta: f64,
    rng: &mut R,
) -> Result<Pose3D> {
    params.validate()?;
    let (_, angles) = sample_angles(params, rng);
    forward_kinematics(params, &angles, topology, delta)
}

/// Camera-frame 2D and 3D pose of a random body pose under a random view.
fn sample_view<R: Rng + ?Sized>(
    params: &QuadrupedParams,
    topology: &SkeletonTopology,
    geometry: &GeometryConfig,
    rng: &mut R,
) -> Result<(Pose3D, RotationSpec, Pose2D)> {
    let pose = sample_pose3d(params, topology, geometry.delta, rng)?;
    let (spec, r) = sample_rotation(rng, geometry.azimuth_range, geometry.elevation_range)?;
    let view = rotate(&pose, &r, geometry.pivot())?;
    let p2 = project(&view, geometry.delta, geometry.z_min)?;
    Ok((pose, spec, p2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    pub poses: Vec<Pose2D>,
    pub source_tag: String,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn save(&self, path: &Path, topology: &SkeletonTopology) -> Result<()> {
        PoseFile::from_poses(topology, &self.poses, Some(&self.source_tag)).write(path)
    }
}

/// `n` prior poses: random body pose, random camera, projection.
pub fn build_prior(
    n: usize,
    params: &QuadrupedParams,
    topology: &SkeletonTopology,
    geometry: &GeometryConfig,
    seed: u64,
) -> Result<PriorSet> {
    if n == 0 {
        return Err(Error::Config("prior size must be at least 1".into()));
    }
    let poses = (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Prior, i as u64);
            sample_view(params, topology, geometry, &mut rng).map(|(_, _, p)| p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PriorSet {
        poses,
        source_tag: "procedural".into(),
    })
}

/// Loads a prior from a pose file, re-mapping joints by name.
pub fn import_prior(path: &Path, topology: &SkeletonTopology) -> Result<PriorSet> {
    let file = PoseFile::read(path)?;
    let poses = file.to_poses::<2>(topology)?;
    if poses.is_empty() {
        return Err(Error::malformed("prior file", "contains no poses"));
    }
    Ok(PriorSet {
        poses,
        source_tag: file.source_tag.unwrap_or_else(|| "imported".into()),
    })
}

/// Appearance perturbations turning a clean skeleton rendering into a
/// training or evaluation image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppearanceConfig {
    pub noise_std: f64,
    pub clutter_blobs: usize,
    pub clutter_intensity: (f64, f64),
    pub clutter_radius: (f64, f64),
    pub stroke_intensity: (f64, f64),
    /// Multiplies the renderer's falloff; below 1 draws thicker strokes.
    pub stroke_gamma_scale: (f64, f64),
    /// Training-only similarity warp, normalized units / radians.
    pub warp_shift: f64,
    pub warp_scale: f64,
    pub warp_rotation: f64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.05,
            clutter_blobs: 3,
            clutter_intensity: (0.1, 0.35),
            clutter_radius: (0.05, 0.2),
            stroke_intensity: (0.6, 1.0),
            stroke_gamma_scale: (0.5, 1.5),
            warp_shift: 0.08,
            warp_scale: 0.05,
            warp_rotation: 0.08,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half: f64) -> f64 {
    if half > 0.0 {
        rng.gen_range(-half..half)
    } else {
        0.0
    }
}

impl AppearanceConfig {
    fn warp<R: Rng + ?Sized>(&self, pose: &Pose2D, rng: &mut R) -> Result<Pose2D> {
        let s = 1.0 + symmetric(rng, self.warp_scale);
        let (sn, cs) = symmetric(rng, self.warp_rotation).sin_cos();
        let (tx, ty) = (
            symmetric(rng, self.warp_shift),
            symmetric(rng, self.warp_shift),
        );
        Pose2D::new(
            pose.coords()
                .iter()
                .map(|&[x, y]| [s * (cs * x - sn * y) + tx, s * (sn * x + cs * y) + ty])
                .collect(),
        )
    }

    /// Renders `pose` with stroke and background perturbations.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        pose: &Pose2D,
        topology: &SkeletonTopology,
        render_cfg: &RenderConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let stroke = RenderConfig {
            gamma: render_cfg.gamma * uniform(rng, self.stroke_gamma_scale),
            ..*render_cfg
        };
        let intensity = uniform(rng, self.stroke_intensity);
        let clean = render(pose, topology, &stroke)?;
        let (h, w) = (render_cfg.height, render_cfg.width);
        let blobs: Vec<(f64, f64, f64, f64)> = (0..self.clutter_blobs)
            .map(|_| {
                (
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    uniform(rng, self.clutter_radius),
                    uniform(rng, self.clutter_intensity),
                )
            })
            .collect();
        let normal = rand_distr::Normal::new(0.0, self.noise_std.max(0.0))
            .map_err(|e| Error::Config(format!("noise std: {e}")))?;
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            let py = crate::autodiff::pixel_center(r, h);
            for c in 0..w {
                let px = crate::autodiff::pixel_center(c, w);
                let mut v = intensity * clean.at(r, c);
                for &(bx, by, radius, strength) in &blobs {
                    let d2 = (px - bx).powi(2) + (py - by).powi(2);
                    v = v.max(strength * (-d2 / (2.0 * radius * radius)).exp());
                }
                if self.noise_std > 0.0 {
                    v += rng.sample(normal);
                }
                out.push(v.clamp(0.0, 1.0));
            }
        }
        Ok(out)
    }
}

/// Everything needed to generate training images and evaluation scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub quadruped: QuadrupedParams,
    pub geometry: GeometryConfig,
    pub render: RenderConfig,
    pub appearance: AppearanceConfig,
}

/// One unlabelled training image with its hidden generating pose.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingImage {
    pub pixels: Vec<f64>,
    pub hidden_pose2d: Pose2D,
}

/// Deterministic, lazily generated set of unlabelled training images.
#[derive(Clone, Debug)]
pub struct SyntheticImages {
    pub config: SceneConfig,
    pub topology: SkeletonTopology,
    pub seed: u64,
    pub len: usize,
}

impl SyntheticImages {
    pub fn new(
        config: SceneConfig,
        topology: SkeletonTopology,
        seed: u64,
        len: usize,
    ) -> Result<Self> {
        config.quadruped.validate()?;
        config.geometry.validate()?;
        config.render.validate()?;
        Ok(Self {
            config,
            topology,
            seed,
            len,
        })
    }

    pub fn sample(&self, index: usize) -> Result<TrainingImage> {
        let mut rng = stream_rng(self.seed, Stream::TrainImages, index as u64);
        let c = &self.config;
        let (_, _, pose2d) = sample_view(&c.quadruped, &self.topology, &c.geometry, &mut rng)?;
        let warped = c.appearance.warp(&pose2d, &mut rng)?;
        let pixels = c
            .appearance
            .apply(&warped, &self.topology, &c.render, &mut rng)?;
        Ok(TrainingImage {
            pixels,
            hidden_pose2d: warped,
        })
    }
}

/// A held-out scene whose ground truth never reaches training.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScene {
    pub image: SkeletonImage,
    pub gt_pose2d: Pose2D,
    /// Body-frame pose; see [`EvalScene::camera_pose3d`] for the view.
    pub gt_pose3d: Pose3D,
    pub camera: RotationSpec,
}

impl EvalScene {
    pub fn rotation(&self) -> RotationMatrix {
        RotationMatrix::from_spec(self.camera)
    }

    /// Ground-truth 3D pose in the camera frame.
    pub fn camera_pose3d(&self, geometry: &GeometryConfig) -> Result<Pose3D> {
        rotate(&self.gt_pose3d, &self.rotation(), geometry.pivot())
    }

    /// Largest deviation between the stored 2D pose and the projection of
    /// the rotated 3D pose.
    pub fn consistency_error(&self, geometry: &GeometryConfig) -> Result<f64> {
        let p = project(
            &self.camera_pose3d(geometry)?,
            geometry.delta,
            geometry.z_min,
        )?;
        Ok(p.coords()
            .iter()
            .zip(self.gt_pose2d.coords())
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max))
    }
}

pub fn build_eval_set(
    n: usize,
    config: &SceneConfig,
    topology: &SkeletonTopology,
    seed: u64,
) -> Result<Vec<EvalScene>> {
    if n == 0 {
        return Err(Error::Config(
            "evaluation set size must be at least 1".into(),
        ));
    }
    config.render.validate()?;
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, Stream::Eval, i as u64);
            let (pose3d, camera, pose2d) =
                sample_view(&config.quadruped, topology, &config.geometry, &mut rng)?;
            let pixels = config
                .appearance
                .apply(&pose2d, topology, &config.render, &mut rng)?;
            Ok(EvalScene {
                image: SkeletonImage::from_pixels(
                    pixels,
                    config.render.height,
                    config.render.width,
                    config.render.gamma,
                )?,
                gt_pose2d: pose2d,
                gt_pose3d: pose3d,
                camera,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn default_params_are_valid() {
        QuadrupedParams::default().validate().unwrap();
    }

    #[test]
    fn sampled_bone_lengths_match_params() {
        let t = SkeletonTopology::quadruped();
        let params = QuadrupedParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (_, angles) = sample_angles(&params, &mut rng);
            params.check_angles(&angles).unwrap();
            let pose = forward_kinematics(&params, &angles, &t, 10.0).unwrap();
            for &(a, b) in t.bones() {
                let expected = params.bone_length(&t.joint_names()[b]).unwrap();
                assert!((dist(pose.joint(a), pose.joint(b)) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn neutral_pose_stands_with_vertical_legs() {
        let t = SkeletonTopology::quadruped();
        let params = QuadrupedParams::default();
        let pose = forward_kinematics(&params, &[0.0; 12], &t, 10.0).unwrap();
        for leg in ["front_left", "front_right"] {
            let s = pose.joint(t.joint_index(&format!("{leg}_shoulder")).unwrap());
            let h = pose.joint(t.joint_index(&format!("{leg}_hoof")).unwrap());
            assert!((s[0] - h[0]).abs() < 1e-12 && (s[2] - h[2]).abs() < 1e-12);
            assert!(h[1] > s[1]);
        }
        assert_eq!(pose.joint(t.root_index()), [0.0, 0.0, 10.0]);
    }

    #[test]
    fn gait_half_period_swaps_left_and_right() {
        let params = QuadrupedParams::default();
        for phase in [0.0, 0.3, 1.7] {
            let a = params.gait_angles(phase);
            let b = params.gait_angles(phase + PI);
            // front-left at phase+pi equals front-right at phase and vice versa
            for k in 0..2 {
                assert!((b[LEG_SWING[0] + k] - a[LEG_SWING[1] + k]).abs() < 1e-12);
                assert!((b[LEG_SWING[1] + k] - a[LEG_SWING[0] + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_angles_are_config_errors() {
        let t = SkeletonTopology::quadruped();
        let params = QuadrupedParams::default();
        let mut angles = [0.0; 12];
        angles[LEG_SWING[0]] = 2.0;
        assert!(matches!(
            forward_kinematics(&params, &angles, &t, 10.0),
            Err(Error::Config(_))
        ));
        let mut wide = params.clone();
        wide.articulations[0].jitter = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pose3d(&wide, &t, 10.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prior_poses_stay_in_frame() {
        let t = SkeletonTopology::quadruped();
        let prior = build_prior(
            300,
            &QuadrupedParams::default(),
            &t,
            &GeometryConfig::default(),
            1,
        )
        .unwrap();
        assert!(prior.poses.iter().all(Pose2D::in_frame));
    }

    #[test]
    fn eval_scenes_are_consistent_and_reproducible() {
        let t = SkeletonTopology::quadruped();
        let cfg = SceneConfig {
            render: RenderConfig {
                height: 32,
                width: 32,
                ..Default::default()
            },
            ..Default::default()
        };
        let scenes = build_eval_set(5, &cfg, &t, 9).unwrap();
        for s in &scenes {
            assert!(s.consistency_error(&cfg.geometry).unwrap() < 1e-6);
            assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(scenes, build_eval_set(5, &cfg, &t, 9).unwrap());
    }
}
