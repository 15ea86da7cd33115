//! Static figures: 2D overlays (red prediction, green ground truth) and
//! panels of a 3D pose seen from several azimuths.

use image::{GrayImage, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_line_segment_mut};

use crate::error::{Error, Result};
use crate::geometry::{project, rotate, RotationMatrix};
use crate::skeleton::{denormalize_pose2d, Pose2D, Pose3D, SkeletonTopology};

pub const RED: Rgb<u8> = Rgb([230, 30, 30]);
pub const GREEN: Rgb<u8> = Rgb([30, 200, 60]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([40, 40, 40]);

/// Grayscale values in `[0, 1]` to an RGB image, upscaled by `scale`.
pub fn gray_to_rgb(pixels: &[f64], height: usize, width: usize, scale: u32) -> Result<RgbImage> {
    if pixels.len() != height * width {
        return Err(Error::Shape(format!(
            "{} pixels for a {height}x{width} image",
            pixels.len()
        )));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([
            (pixels[y as usize * width + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    });
    let rgb = image::DynamicImage::ImageLuma8(img).to_rgb8();
    Ok(image::imageops::resize(
        &rgb,
        width as u32 * scale,
        height as u32 * scale,
        image::imageops::FilterType::Nearest,
    ))
}

/// Draws bones and joints of `pose` (normalized coordinates) onto `canvas`.
pub fn draw_pose(
    canvas: &mut RgbImage,
    pose: &Pose2D,
    topology: &SkeletonTopology,
    color: Rgb<u8>,
) -> Result<()> {
    if pose.num_joints() != topology.num_joints() {
        return Err(Error::Shape(format!(
            "pose has {} joints, topology {}",
            pose.num_joints(),
            topology.num_joints()
        )));
    }
    let size = (canvas.height() as usize, canvas.width() as usize);
    let px: Vec<(f32, f32)> = denormalize_pose2d(pose, size)
        .iter()
        .map(|&[x, y]| (x as f32 - 0.5, y as f32 - 0.5))
        .collect();
    for &(a, b) in topology.bones() {
        draw_line_segment_mut(canvas, px[a], px[b], color);
    }
    let r = (canvas.width() / 128).max(1) as i32;
    for &(x, y) in &px {
        draw_filled_circle_mut(canvas, (x.round() as i32, y.round() as i32), r, color);
    }
    Ok(())
}

/// `background` with the prediction in red and, if given, ground truth in
/// green underneath it.
pub fn overlay_2d(
    background: &RgbImage,
    prediction: &Pose2D,
    ground_truth: Option<&Pose2D>,
    topology: &SkeletonTopology,
) -> Result<RgbImage> {
    let mut canvas = background.clone();
    if let Some(gt) = ground_truth {
        draw_pose(&mut canvas, gt, topology, GREEN)?;
    }
    draw_pose(&mut canvas, prediction, topology, RED)?;
    Ok(canvas)
}

/// One panel per azimuth (radians), side by side. Each view rotates the
/// pose about its centroid and projects it at distance `delta`.
pub fn novel_views(
    pose: &Pose3D,
    topology: &SkeletonTopology,
    azimuths: &[f64],
    delta: f64,
    panel: u32,
) -> Result<RgbImage> {
    let n = pose.num_joints() as f64;
    let mut centre = [0.0; 3];
    for p in pose.coords() {
        for k in 0..3 {
            centre[k] += p[k] / n;
        }
    }
    // Centre the pose on the depth plane so every view is framed alike.
    let shifted = Pose3D::new(
        pose.coords()
            .iter()
            .map(|p| [p[0] - centre[0], p[1] - centre[1], p[2] - centre[2] + delta])
            .collect(),
    )?;
    let pivot = [0.0, 0.0, delta];
    let mut canvas = RgbImage::from_pixel(panel * azimuths.len().max(1) as u32, panel, BACKGROUND);
    for (i, &az) in azimuths.iter().enumerate() {
        let view = project(
            &rotate(&shifted, &RotationMatrix::azimuth(az), pivot)?,
            delta,
            1e-3,
        )?;
        let mut tile = RgbImage::from_pixel(panel, panel, BACKGROUND);
        draw_pose(&mut tile, &view, topology, INK)?;
        image::imageops::replace(&mut canvas, &tile, i as i64 * panel as i64, 0);
    }
    Ok(canvas)
}

/// Images of equal height placed left to right.
pub fn hstack(images: &[RgbImage]) -> RgbImage {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum();
    let mut out = RgbImage::from_pixel(w, h, BACKGROUND);
    let mut x = 0i64;
    for img in images {
        image::imageops::replace(&mut out, img, x, 0);
        x += img.width() as i64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(y: f64) -> Pose2D {
        Pose2D::new((0..20).map(|j| [-0.8 + 0.08 * j as f64, y]).collect()).unwrap()
    }

    #[test]
    fn overlay_colours_prediction_and_truth() {
        let topo = SkeletonTopology::quadruped();
        let bg = RgbImage::from_pixel(64, 64, Rgb([0, 0, 0]));
        let img = overlay_2d(&bg, &row(-0.5), Some(&row(0.5)), &topo).unwrap();
        // a connected tree on one row covers the row between its extreme joints;
        // normalized -0.5 / 0.5 land on pixel rows 15.5 / 47.5
        assert_eq!(*img.get_pixel(32, 15), RED);
        assert_eq!(*img.get_pixel(32, 47), GREEN);
        assert_eq!(*img.get_pixel(32, 32), Rgb([0, 0, 0]));
    }

    #[test]
    fn novel_views_have_one_panel_per_azimuth() {
        let topo = SkeletonTopology::quadruped();
        let pose = Pose3D::new(
            (0..topo.num_joints())
                .map(|j| {
                    [
                        0.05 * j as f64 - 0.5,
                        0.02 * j as f64,
                        10.0 + 0.01 * j as f64,
                    ]
                })
                .collect(),
        )
        .unwrap();
        let img = novel_views(&pose, &topo, &[0.0, 1.0, 2.0], 10.0, 96).unwrap();
        assert_eq!(img.dimensions(), (288, 96));
        for panel in 0..3 {
            let inked = (0..96)
                .flat_map(|x| (0..96).map(move |y| (x, y)))
                .any(|(x, y)| *img.get_pixel(panel * 96 + x, y) == INK);
            assert!(inked, "panel {panel} is empty");
        }
    }
}
