//! Differentiable skeleton rendering.
//!
//! A pixel's intensity is `exp(-gamma * d^2)` where `d` is the distance from
//! the pixel centre to the nearest bone segment. Taking the nearest bone is
//! the same as taking the max intensity over bones, and the gradient flows to
//! that bone's two endpoints only.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{pixel_center, Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::skeleton::{Pose2D, SkeletonTopology};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub gamma: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            gamma: 500.0,
            height: 128,
            width: 128,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "falloff gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonImage {
    pixels: Vec<f64>,
    height: usize,
    width: usize,
    gamma: f64,
}

impl SkeletonImage {
    /// Wraps an existing row-major buffer of intensities in `[0, 1]`.
    pub fn from_pixels(pixels: Vec<f64>, height: usize, width: usize, gamma: f64) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::malformed("image", "intensity outside [0, 1]"));
        }
        Ok(Self {
            pixels,
            height,
            width,
            gamma,
        })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }

    /// 8-bit grayscale, `round_half_up(255 v)`.
    pub fn to_gray8(&self) -> image::GrayImage {
        let bytes = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path)?;
        Ok(())
    }
}

/// Nearest bone and squared distance for a point.
#[inline]
fn nearest_bone(px: f64, py: f64, coords: &[f64], bones: &[(usize, usize)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (bi, &(a, b)) in bones.iter().enumerate() {
        let d2 = segment_dist2(px, py, coords, a, b).0;
        if d2 < best.1 {
            best = (bi, d2);
        }
    }
    best
}

/// Squared distance to segment `a-b` and the clamped segment parameter.
#[inline]
fn segment_dist2(px: f64, py: f64, coords: &[f64], a: usize, b: usize) -> (f64, f64) {
    let (ax, ay) = (coords[2 * a], coords[2 * a + 1]);
    let (ex, ey) = (coords[2 * b] - ax, coords[2 * b + 1] - ay);
    let len2 = ex * ex + ey * ey;
    let t = if len2 > 0.0 {
        (((px - ax) * ex + (py - ay) * ey) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (px - (ax + t * ex), py - (ay + t * ey));
    (dx * dx + dy * dy, t)
}

fn render_flat(
    coords: &[f64],
    bones: &[(usize, usize)],
    cfg: &RenderConfig,
    out: &mut [f64],
    argmax: &mut [u16],
) {
    let (h, w) = (cfg.height, cfg.width);
    for r in 0..h {
        let py = pixel_center(r, h);
        for c in 0..w {
            let px = pixel_center(c, w);
            let (bone, d2) = nearest_bone(px, py, coords, bones);
            out[r * w + c] = (-cfg.gamma * d2).exp();
            argmax[r * w + c] = bone as u16;
        }
    }
}

pub fn render(
    pose: &Pose2D,
    topology: &SkeletonTopology,
    cfg: &RenderConfig,
) -> Result<SkeletonImage> {
    cfg.validate()?;
    if pose.num_joints() != topology.num_joints() {
        return Err(Error::SchemaMismatch {
            expected: topology.num_joints(),
            actual: pose.num_joints(),
        });
    }
    let n = cfg.height * cfg.width;
    let mut pixels = vec![0.0; n];
    let mut argmax = vec![0u16; n];
    render_flat(
        &pose.flat(),
        topology.bones(),
        cfg,
        &mut pixels,
        &mut argmax,
    );
    Ok(SkeletonImage {
        pixels,
        height: cfg.height,
        width: cfg.width,
        gamma: cfg.gamma,
    })
}

pub fn render_batch(
    poses: &[Pose2D],
    topology: &SkeletonTopology,
    cfg: &RenderConfig,
) -> Result<Vec<SkeletonImage>> {
    poses.iter().map(|p| render(p, topology, cfg)).collect()
}

/// Packs images into a `[B, 1, H, W]` tensor.
pub fn images_to_tensor<T: Real>(images: &[SkeletonImage]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend(im.pixels.iter().map(|&v| T::from_f64_lossy(v)));
    }
    Ok(Tensor::new([images.len(), 1, h, w], data))
}

/// Splits a `[B, 1, H, W]` tensor into images (values clamped to `[0, 1]`).
pub fn tensor_to_images<T: Real>(t: &Tensor<T>, gamma: f64) -> Result<Vec<SkeletonImage>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Shape(format!("expected [B, 1, H, W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    Ok(t.data()
        .chunks_exact(h * w)
        .map(|c| SkeletonImage {
            pixels: c.iter().map(|v| v.to_f64_lossy().clamp(0.0, 1.0)).collect(),
            height: h,
            width: w,
            gamma,
        })
        .collect())
}

struct RenderOp {
    bones: Vec<(usize, usize)>,
    cfg: RenderConfig,
    argmax: Vec<u16>,
}

impl<T: Real> Backward<T> for RenderOp {
    fn backward(
        &self,
        x: &[&Tensor<T>],
        y: &Tensor<T>,
        g: &Tensor<T>,
        _: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let s = x[0].shape();
        let (batch, joints) = (s[0], s[1]);
        let (h, w) = (self.cfg.height, self.cfg.width);
        let coords = x[0].to_f64_vec();
        let mut grad = vec![0.0f64; coords.len()];
        for b in 0..batch {
            let cb = &coords[b * joints * 2..(b + 1) * joints * 2];
            let gb = &mut grad[b * joints * 2..(b + 1) * joints * 2];
            for r in 0..h {
                let py = pixel_center(r, h);
                for c in 0..w {
                    let k = (b * h + r) * w + c;
                    let v = y.data()[k].to_f64_lossy();
                    let gk = g.data()[k].to_f64_lossy();
                    if v == 0.0 || gk == 0.0 {
                        continue;
                    }
                    let px = pixel_center(c, w);
                    let (ja, jb) = self.bones[self.argmax[k] as usize];
                    let (_, t) = segment_dist2(px, py, cb, ja, jb);
                    let qx = cb[2 * ja] + t * (cb[2 * jb] - cb[2 * ja]);
                    let qy = cb[2 * ja + 1] + t * (cb[2 * jb + 1] - cb[2 * ja + 1]);
                    // dv/dq = 2 gamma v (u - q); q depends on a with weight (1 - t), b with t
                    let f = 2.0 * self.cfg.gamma * v * gk;
                    let (ux, uy) = (f * (px - qx), f * (py - qy));
                    gb[2 * ja] += (1.0 - t) * ux;
                    gb[2 * ja + 1] += (1.0 - t) * uy;
                    gb[2 * jb] += t * ux;
                    gb[2 * jb + 1] += t * uy;
                }
            }
        }
        vec![Some(Tensor::from_f64(s.to_vec(), &grad))]
    }
}

/// Renders `[B, J, 2]` poses to `[B, 1, H, W]` skeleton images on the tape.
pub fn render_on_tape<T: Real>(
    tape: &mut Tape<T>,
    poses: Var,
    topology: &SkeletonTopology,
    cfg: &RenderConfig,
) -> Result<Var> {
    cfg.validate()?;
    let s = tape.shape(poses).to_vec();
    if s.len() != 3 || s[2] != 2 || s[1] != topology.num_joints() {
        return Err(Error::Shape(format!(
            "render expects [B, {}, 2], got {s:?}",
            topology.num_joints()
        )));
    }
    let (batch, joints) = (s[0], s[1]);
    let n = cfg.height * cfg.width;
    let coords = tape.value(poses).to_f64_vec();
    let mut pixels = vec![0.0; batch * n];
    let mut argmax = vec![0u16; batch * n];
    for b in 0..batch {
        render_flat(
            &coords[b * joints * 2..(b + 1) * joints * 2],
            topology.bones(),
            cfg,
            &mut pixels[b * n..(b + 1) * n],
            &mut argmax[b * n..(b + 1) * n],
        );
    }
    let value = Tensor::from_f64([batch, 1, cfg.height, cfg.width], &pixels);
    Ok(tape.push_op(
        value,
        &[poses],
        RenderOp {
            bones: topology.bones().to_vec(),
            cfg: *cfg,
            argmax,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_topology_pose(a: [f64; 2], b: [f64; 2]) -> (SkeletonTopology, Pose2D) {
        // every joint on one of the two endpoints; withers-neck spans a-b
        let t = SkeletonTopology::quadruped();
        let coords = (0..20).map(|j| if j % 2 == 0 { a } else { b }).collect();
        (t, Pose2D::new(coords).unwrap())
    }

    #[test]
    fn point_blob_peaks_at_origin_and_decays() {
        let t = SkeletonTopology::quadruped();
        let pose = Pose2D::new(vec![[0.0, 0.0]; 20]).unwrap();
        let cfg = RenderConfig {
            gamma: 50.0,
            height: 4,
            width: 4,
        };
        let img = render(&pose, &t, &cfg).unwrap();
        // pixel centres at +-0.25, +-0.75; nearest to origin are the four centre pixels
        let centre = (-50.0f64 * 2.0 * 0.25 * 0.25).exp();
        assert!((img.at(1, 1) - centre).abs() < 1e-15);
        assert!(img.at(0, 0) < img.at(0, 1) && img.at(0, 1) < img.at(1, 1));
        let odd = RenderConfig {
            gamma: 50.0,
            height: 5,
            width: 5,
        };
        assert_eq!(render(&pose, &t, &odd).unwrap().at(2, 2), 1.0);
    }

    #[test]
    fn far_away_pose_renders_black() {
        let t = SkeletonTopology::quadruped();
        let pose = Pose2D::new(vec![[5.0, 5.0]; 20]).unwrap();
        let img = render(&pose, &t, &RenderConfig::default()).unwrap();
        assert!(img.max() < 1e-3);
    }

    #[test]
    fn horizontal_bone_matches_perpendicular_distance() {
        let (t, pose) = line_topology_pose([-0.5, 0.0], [0.5, 0.0]);
        let cfg = RenderConfig {
            gamma: 500.0,
            height: 128,
            width: 128,
        };
        let img = render(&pose, &t, &cfg).unwrap();
        for r in [63usize, 64, 66] {
            let py = pixel_center(r, 128);
            for c in 0..128 {
                let px = pixel_center(c, 128);
                let dx = if px < -0.5 {
                    px + 0.5
                } else if px > 0.5 {
                    px - 0.5
                } else {
                    0.0
                };
                let expected = (-500.0 * (dx * dx + py * py)).exp();
                assert!((img.at(r, c) - expected).abs() < 1e-12, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn non_positive_gamma_is_rejected() {
        let t = SkeletonTopology::quadruped();
        let pose = Pose2D::new(vec![[0.0, 0.0]; 20]).unwrap();
        let cfg = RenderConfig {
            gamma: 0.0,
            ..Default::default()
        };
        assert!(matches!(render(&pose, &t, &cfg), Err(Error::Config(_))));
        assert!(render_batch(&[], &t, &RenderConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn png_quantization_rounds_half_up() {
        let img = SkeletonImage {
            pixels: vec![0.0, 0.5, 1.0],
            height: 1,
            width: 3,
            gamma: 1.0,
        };
        assert_eq!(img.to_gray8().as_raw(), &vec![0u8, 128, 255]);
    }
}
