//! Video to training frames: split a clip into frames, keep the frames a
//! detector accepts, and store fixed-size images with their masks.
//!
//! Supported containers are animated GIF and directories of still images.
//! Downloading is left to an external fetch command, see [`fetch_video`].

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::Command;

use image::codecs::gif::GifDecoder;
use image::imageops::FilterType;
use image::{AnimationDecoder, GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.9;
pub const DEFAULT_SIZE: u32 = 128;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "gif"];

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: RgbImage,
}

/// Decoded frames of one clip, in playback order.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub source_id: String,
    pub frames: Vec<Frame>,
}

fn unreadable(path: &Path, detail: impl ToString) -> Error {
    Error::UnreadableVideo {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn source_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into())
}

/// Splits an animated GIF, or a directory of images sorted by file name,
/// into frames numbered from 0.
pub fn split_video(path: &Path) -> Result<Video> {
    let frames = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| unreadable(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        files
            .iter()
            .enumerate()
            .map(|(index, f)| {
                let image = image::open(f).map_err(|e| unreadable(f, e))?.to_rgb8();
                Ok(Frame { index, image })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let file = File::open(path).map_err(|e| unreadable(path, e))?;
        let decoder = GifDecoder::new(BufReader::new(file)).map_err(|e| unreadable(path, e))?;
        decoder
            .into_frames()
            .enumerate()
            .map(|(index, f)| {
                let f = f.map_err(|e| unreadable(path, e))?;
                let rgba = f.into_buffer();
                Ok(Frame {
                    index,
                    image: image::DynamicImage::ImageRgba8(rgba).to_rgb8(),
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    if frames.is_empty() {
        return Err(unreadable(path, "no frames"));
    }
    Ok(Video {
        source_id: source_id(path),
        frames,
    })
}

/// A detector's answer for one frame: confidence in `[0, 1]` and a binary
/// mask (values 0 and 1) the size of the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub confidence: f64,
    pub mask: GrayImage,
}

/// Finds the animal in a frame. `Ok(None)` means "no animal"; `Err` is a
/// detector failure, which skips the frame with a warning.
pub trait Detector {
    fn detect(&self, image: &RgbImage) -> std::result::Result<Option<Detection>, String>;
}

/// Never finds anything.
pub struct NoDetection;

impl Detector for NoDetection {
    fn detect(&self, _: &RgbImage) -> std::result::Result<Option<Detection>, String> {
        Ok(None)
    }
}

/// Accepts every frame with confidence 1 and a full mask.
pub struct AcceptAll;

impl Detector for AcceptAll {
    fn detect(&self, image: &RgbImage) -> std::result::Result<Option<Detection>, String> {
        Ok(Some(Detection {
            confidence: 1.0,
            mask: GrayImage::from_pixel(image.width(), image.height(), Luma([1])),
        }))
    }
}

/// Foreground is every pixel brighter than `threshold`; confidence is 1
/// when the foreground covers at least `min_fraction` of the frame, else 0.
pub struct BrightnessDetector {
    pub threshold: u8,
    pub min_fraction: f64,
}

impl Detector for BrightnessDetector {
    fn detect(&self, image: &RgbImage) -> std::result::Result<Option<Detection>, String> {
        let gray = image::DynamicImage::ImageRgb8(image.clone()).to_luma8();
        let mask = GrayImage::from_fn(gray.width(), gray.height(), |x, y| {
            Luma([(gray.get_pixel(x, y)[0] > self.threshold) as u8])
        });
        let covered = mask.pixels().filter(|p| p[0] == 1).count() as f64;
        let fraction = covered / (mask.width() * mask.height()).max(1) as f64;
        if fraction < self.min_fraction {
            return Ok(None);
        }
        Ok(Some(Detection {
            confidence: 1.0,
            mask,
        }))
    }
}

/// Runs an external program per frame.
///
/// The program is called as `program [args...] <frame.png> <mask.png>`. It
/// must print a confidence in `[0, 1]` on stdout and, when the confidence is
/// positive, write a single-channel mask of the frame's size (non-zero =
/// animal). An empty stdout means no detection; a non-zero exit status is a
/// detector failure.
pub struct CommandDetector {
    pub program: String,
    pub args: Vec<String>,
    pub scratch: PathBuf,
}

impl Detector for CommandDetector {
    fn detect(&self, image: &RgbImage) -> std::result::Result<Option<Detection>, String> {
        let frame = self.scratch.join("frame.png");
        let mask_path = self.scratch.join("mask.png");
        let _ = std::fs::remove_file(&mask_path);
        image
            .save(&frame)
            .map_err(|e| format!("writing frame: {e}"))?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&frame)
            .arg(&mask_path)
            .output()
            .map_err(|e| format!("running {}: {e}", self.program))?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let text = text.trim();
        if text.is_empty() {
            return Ok(None);
        }
        let confidence: f64 = text
            .parse()
            .map_err(|_| format!("bad confidence {text:?}"))?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(format!("confidence {confidence} outside [0, 1]"));
        }
        let raw = image::open(&mask_path)
            .map_err(|e| format!("reading mask: {e}"))?
            .to_luma8();
        if raw.dimensions() != image.dimensions() {
            return Err("mask size differs from frame size".into());
        }
        let mask = GrayImage::from_fn(raw.width(), raw.height(), |x, y| {
            Luma([(raw.get_pixel(x, y)[0] > 0) as u8])
        });
        Ok(Some(Detection { confidence, mask }))
    }
}

/// A frame the detector accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectedFrame {
    pub source_id: String,
    pub frame: Frame,
    pub detection: Detection,
}

/// Result of [`filter_frames`]: the kept frames plus one warning per
/// detector failure.
#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub kept: Vec<DetectedFrame>,
    pub warnings: Vec<String>,
}

/// Keeps frames detected with confidence at least `min_confidence`.
/// Aborts when the detector fails on more than half of the frames.
pub fn filter_frames(
    video: &Video,
    detector: &dyn Detector,
    min_confidence: f64,
) -> Result<Filtered> {
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    for frame in &video.frames {
        match detector.detect(&frame.image) {
            Ok(Some(d)) => {
                if d.mask.dimensions() != frame.image.dimensions() {
                    warnings.push(format!(
                        "frame {}: mask size differs from frame size",
                        frame.index
                    ));
                    continue;
                }
                if d.confidence >= min_confidence {
                    kept.push(DetectedFrame {
                        source_id: video.source_id.clone(),
                        frame: frame.clone(),
                        detection: d,
                    });
                }
            }
            Ok(None) => {}
            Err(e) => warnings.push(format!("frame {}: {e}", frame.index)),
        }
    }
    if 2 * warnings.len() > video.frames.len() {
        return Err(Error::DetectorAborted {
            failed: warnings.len(),
            total: video.frames.len(),
        });
    }
    Ok(Filtered { kept, warnings })
}

/// One stored frame, as listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub source: String,
    pub frame_index: usize,
    /// Paths relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub confidence: f64,
    pub split: String,
}

/// Resizes frames (bilinear) and masks (nearest neighbour) to
/// `size x size`, writes them under `out_dir` and rewrites the manifest.
pub fn resize_and_store(
    frames: &[DetectedFrame],
    size: u32,
    out_dir: &Path,
    split: &str,
) -> Result<Vec<FrameRecord>> {
    if size == 0 {
        return Err(Error::Config("output size must be positive".into()));
    }
    let ctx = |p: &Path| format!("writing {}", p.display());
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(ctx(&d), e))?;
    }
    let mut records = Vec::with_capacity(frames.len());
    for f in frames {
        let name = format!("{}_{:06}.png", f.source_id, f.frame.index);
        let image = format!("images/{name}");
        let mask = format!("masks/{name}");
        let resized = image::imageops::resize(&f.frame.image, size, size, FilterType::Triangle);
        let m = image::imageops::resize(&f.detection.mask, size, size, FilterType::Nearest);
        resized.save(out_dir.join(&image))?;
        m.save(out_dir.join(&mask))?;
        records.push(FrameRecord {
            source: f.source_id.clone(),
            frame_index: f.frame.index,
            image,
            mask,
            confidence: f.detection.confidence,
            split: split.to_string(),
        });
    }
    write_manifest(&out_dir.join(MANIFEST_FILE), &records)?;
    Ok(records)
}

pub fn write_manifest<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            serde_json::from_str(&l).map_err(|e| {
                Error::malformed(format!("manifest {}", path.display()), e.to_string())
            })
        })
        .collect()
}

/// Runs an external fetch command to download `url` to `dest`. Every `{url}`
/// and `{out}` in `template` is replaced before the command is split on
/// whitespace, e.g. `yt-dlp -f mp4 -o {out} {url}`.
pub fn fetch_video(template: &str, url: &str, dest: &Path) -> Result<()> {
    let dest_s = dest.display().to_string();
    let parts: Vec<String> = template
        .split_whitespace()
        .map(|p| p.replace("{url}", url).replace("{out}", &dest_s))
        .collect();
    let (program, args) = parts
        .split_first()
        .ok_or_else(|| Error::Config("empty fetch command".into()))?;
    let status = Command::new(program)
        .args(args)
        .status()
        .map_err(|e| Error::io(format!("running fetch command {program}"), e))?;
    if !status.success() {
        return Err(Error::Config(format!("fetch command exited with {status}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::codecs::gif::GifEncoder;
    use image::{Delay, Rgba, RgbaImage};

    pub(crate) fn write_gif(path: &Path, n: usize, size: u32) {
        let f = File::create(path).unwrap();
        let mut enc = GifEncoder::new(f);
        for i in 0..n {
            let img = RgbaImage::from_fn(size, size, |x, y| {
                let on = (x + y + i as u32 * 3) % 11 < 4;
                Rgba([if on { 220 } else { 20 }, (i * 20) as u8, 40, 255])
            });
            enc.encode_frame(image::Frame::from_parts(
                img,
                0,
                0,
                Delay::from_numer_denom_ms(40, 1),
            ))
            .unwrap();
        }
    }

    /// Counts image descriptors by walking the GIF block structure.
    fn count_gif_frames(bytes: &[u8]) -> usize {
        let mut i = 13;
        let flags = bytes[10];
        if flags & 0x80 != 0 {
            i += 3 << ((flags & 7) + 1);
        }
        let skip_sub_blocks = |mut i: usize| {
            while bytes[i] != 0 {
                i += bytes[i] as usize + 1;
            }
            i + 1
        };
        let mut frames = 0;
        loop {
            match bytes[i] {
                0x21 => i = skip_sub_blocks(i + 2),
                0x2C => {
                    frames += 1;
                    let local = bytes[i + 9];
                    i += 10;
                    if local & 0x80 != 0 {
                        i += 3 << ((local & 7) + 1);
                    }
                    i = skip_sub_blocks(i + 1);
                }
                0x3B => return frames,
                b => panic!("unexpected block 0x{b:02x}"),
            }
        }
    }

    fn checksums(v: &Video) -> Vec<String> {
        use sha2::{Digest, Sha256};
        v.frames
            .iter()
            .map(|f| format!("{:x}", Sha256::digest(f.image.as_raw())))
            .collect()
    }

    #[test]
    fn gif_frames_are_ordered_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.gif");
        write_gif(&path, 10, 32);
        let v = split_video(&path).unwrap();
        assert_eq!(v.frames.len(), 10);
        assert_eq!(
            v.frames.iter().map(|f| f.index).collect::<Vec<_>>(),
            (0..10).collect::<Vec<_>>()
        );
        assert_eq!(
            v.frames.len(),
            count_gif_frames(&std::fs::read(&path).unwrap())
        );
        assert_eq!(checksums(&v), checksums(&split_video(&path).unwrap()));
        assert_eq!(v.source_id, "clip");
    }

    #[test]
    fn unreadable_container_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.mp4");
        std::fs::write(&path, b"not a video").unwrap();
        assert!(matches!(
            split_video(&path),
            Err(Error::UnreadableVideo { .. })
        ));
    }

    fn video(n: usize) -> Video {
        Video {
            source_id: "v".into(),
            frames: (0..n)
                .map(|index| Frame {
                    index,
                    image: RgbImage::from_pixel(8, 8, image::Rgb([index as u8 * 10, 0, 0])),
                })
                .collect(),
        }
    }

    /// Frame `i`: failure when `i % 5 == 4`, nothing when `i % 5 == 3`,
    /// otherwise confidence `i % 5 / 2` clamped to 1.
    struct Pattern;

    impl Detector for Pattern {
        fn detect(&self, image: &RgbImage) -> std::result::Result<Option<Detection>, String> {
            let i = (image.get_pixel(0, 0)[0] / 10) as usize;
            match i % 5 {
                4 => Err("boom".into()),
                3 => Ok(None),
                k => Ok(Some(Detection {
                    confidence: (k as f64 / 2.0).min(1.0),
                    mask: GrayImage::from_pixel(8, 8, Luma([1])),
                })),
            }
        }
    }

    struct Broken;

    impl Detector for Broken {
        fn detect(&self, _: &RgbImage) -> std::result::Result<Option<Detection>, String> {
            Err("offline".into())
        }
    }

    #[test]
    fn filtering_follows_the_detector() {
        let v = video(10);
        assert!(filter_frames(&v, &NoDetection, 0.9)
            .unwrap()
            .kept
            .is_empty());
        assert_eq!(filter_frames(&v, &AcceptAll, 0.9).unwrap().kept.len(), 10);
        let f = filter_frames(&v, &Pattern, 0.9).unwrap();
        // confidences: k=0 -> 0, k=1 -> 0.5, k=2 -> 1.0
        assert_eq!(
            f.kept.iter().map(|d| d.frame.index).collect::<Vec<_>>(),
            [2, 7]
        );
        assert_eq!(f.warnings.len(), 2);
        assert!(matches!(
            filter_frames(&v, &Broken, 0.9),
            Err(Error::DetectorAborted {
                failed: 10,
                total: 10
            })
        ));
    }

    #[test]
    fn stored_frames_are_resized_and_reproducible() {
        let frames: Vec<DetectedFrame> = (0..3)
            .map(|i| DetectedFrame {
                source_id: "clip".into(),
                frame: Frame {
                    index: i,
                    image: RgbImage::from_fn(256, 256, |x, y| {
                        image::Rgb([(x % 256) as u8, (y % 256) as u8, i as u8])
                    }),
                },
                detection: Detection {
                    confidence: 0.95,
                    mask: GrayImage::from_fn(256, 256, |x, y| Luma([((x / 7 + y / 5) % 2) as u8])),
                },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let records = resize_and_store(&frames, 128, dir.path(), "train").unwrap();
        let read_bytes = |r: &FrameRecord| {
            (
                std::fs::read(dir.path().join(&r.image)).unwrap(),
                std::fs::read(dir.path().join(&r.mask)).unwrap(),
            )
        };
        let first: Vec<_> = records.iter().map(read_bytes).collect();
        for r in &records {
            let img = image::open(dir.path().join(&r.image)).unwrap();
            let mask = image::open(dir.path().join(&r.mask)).unwrap().to_luma8();
            assert_eq!((img.width(), img.height()), (128, 128));
            assert_eq!(mask.dimensions(), (128, 128));
            assert!(mask.pixels().all(|p| p[0] <= 1));
        }
        let listed: Vec<FrameRecord> = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(listed, records);
        let mut stored: Vec<String> = std::fs::read_dir(dir.path().join("images"))
            .unwrap()
            .map(|e| format!("images/{}", e.unwrap().file_name().to_string_lossy()))
            .collect();
        stored.sort();
        assert_eq!(
            stored,
            records.iter().map(|r| r.image.clone()).collect::<Vec<_>>()
        );
        resize_and_store(&frames, 128, dir.path(), "train").unwrap();
        assert_eq!(records.iter().map(read_bytes).collect::<Vec<_>>(), first);
    }

    #[test]
    fn brightness_detector_masks_bright_pixels() {
        let img = RgbImage::from_fn(10, 10, |x, _| {
            image::Rgb(if x < 5 { [255; 3] } else { [0; 3] })
        });
        let d = BrightnessDetector {
            threshold: 128,
            min_fraction: 0.1,
        }
        .detect(&img)
        .unwrap()
        .unwrap();
        assert_eq!(d.mask.pixels().filter(|p| p[0] == 1).count(), 50);
        let dark = RgbImage::new(10, 10);
        assert!(BrightnessDetector {
            threshold: 128,
            min_fraction: 0.1
        }
        .detect(&dark)
        .unwrap()
        .is_none());
    }
}
