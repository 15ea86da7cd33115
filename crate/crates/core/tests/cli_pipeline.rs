use std::path::Path;
use std::process::Command;

use image::codecs::gif::GifEncoder;
use image::{Delay, Frame, Rgba, RgbaImage};

const TINY: &str = r#"
steps = 6
batch_size = 2
omega_warmup_steps = 2
n_train_images = 12
n_prior = 12
n_eval = 6
validation_size = 4
checkpoint_every = 3
validation_every = 3

[network]
image_size = 32
lifter_width = 32

[scene.render]
height = 32
width = 32
gamma = 31.25
"#;

fn selfpose(root: &Path, args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_selfpose"))
        .current_dir(root)
        .arg("--output-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "selfpose {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synthetic_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("tiny.toml"), TINY).unwrap();
    let cfg = root.join("tiny.toml");
    let cfg = cfg.to_str().unwrap();

    selfpose(root, &["generate-prior", "--config", cfg, "--out", "prior"]);
    selfpose(root, &["make-dataset", "--config", cfg, "--out", "data"]);
    let manifest = std::fs::read_to_string(root.join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 12 + 4 + 6);

    selfpose(
        root,
        &[
            "train",
            "--config",
            cfg,
            "--data",
            "data",
            "--prior",
            "prior/prior.json",
            "--out",
            "run",
        ],
    );
    assert!(root.join("run/final.ckpt").exists());
    assert!(root.join("run/stamp.json").exists());
    let log = std::fs::read_to_string(root.join("run/metrics.jsonl")).unwrap();
    assert!(log.contains("\"val_pck\""));

    selfpose(
        root,
        &[
            "eval",
            "--checkpoint",
            "run/final.ckpt",
            "--data",
            "data",
            "--out",
            "eval",
        ],
    );
    let report = json(&root.join("eval/report.json"));
    let pck = report["pck"]["mean"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&pck));
    assert_eq!(report["pck"]["samples"].as_u64(), Some(6));
    let table = std::fs::read_to_string(root.join("eval/report.txt")).unwrap();
    assert!(table.contains("Hooves"));

    let img = root.join("data/eval/images");
    let first = std::fs::read_dir(&img)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    selfpose(
        root,
        &[
            "predict",
            "--checkpoint",
            "run/final.ckpt",
            first.to_str().unwrap(),
            "--out",
            "pred",
        ],
    );
    let preds = std::fs::read_to_string(root.join("pred/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 1);

    selfpose(
        root,
        &[
            "plot",
            "--checkpoint",
            "run/final.ckpt",
            "--data",
            "data",
            "--count",
            "2",
            "--out",
            "fig",
        ],
    );
    assert!(root.join("fig/overlay_000.png").exists());
    assert!(root.join("fig/views_001.png").exists());

    // resuming the finished run from its stamp changes nothing
    let before = std::fs::read(root.join("run/final.ckpt")).unwrap();
    selfpose(
        root,
        &[
            "train",
            "--resume",
            "run/final.ckpt",
            "--data",
            "data",
            "--prior",
            "prior/prior.json",
            "--out",
            "run",
        ],
    );
    assert_eq!(std::fs::read(root.join("run/final.ckpt")).unwrap(), before);
}

#[test]
fn ingested_frames_feed_training() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gif = root.join("clip.gif");
    {
        let file = std::fs::File::create(&gif).unwrap();
        let mut enc = GifEncoder::new(file);
        for k in 0..4u32 {
            let img = RgbaImage::from_fn(64, 64, |x, y| {
                let on = (x as i32 - 20 - 4 * k as i32).abs() < 3 || (y as i32 - 32).abs() < 2;
                if on {
                    Rgba([240, 240, 240, 255])
                } else {
                    Rgba([10, 10, 10, 255])
                }
            });
            enc.encode_frame(Frame::from_parts(
                img,
                0,
                0,
                Delay::from_numer_denom_ms(40, 1),
            ))
            .unwrap();
        }
    }
    selfpose(
        root,
        &[
            "ingest",
            gif.to_str().unwrap(),
            "--detector",
            "brightness",
            "--min-confidence",
            "0.0",
            "--size",
            "32",
            "--out",
            "frames",
        ],
    );
    let manifest = std::fs::read_to_string(root.join("frames/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);

    std::fs::write(
        root.join("tiny.toml"),
        TINY.replace("steps = 6", "steps = 3"),
    )
    .unwrap();
    let cfg = root.join("tiny.toml");
    selfpose(
        root,
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            "frames",
            "--out",
            "run",
        ],
    );
    assert!(root.join("run/final.ckpt").exists());
}
