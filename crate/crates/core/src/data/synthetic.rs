//! Seeded synthetic video datasets of oriented, drifting stripes, for
//! smoke tests and demos. Class `c` uses stripe orientation `c * pi / C`.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use super::frames::{frame_path, write_frame, Frame};
use super::manifest::{write_manifest, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 2,
            train_per_class: 4,
            val_per_class: 0,
            n_frames: 16,
            width: 80,
            height: 64,
            seed: 0,
        }
    }
}

/// Writes frames under `dir/videos/<id>/` and a manifest `dir/manifest.tsv`
/// with relative frame directories; returns the manifest path.
pub fn generate(dir: &Path, cfg: &SyntheticConfig) -> Result<PathBuf> {
    if cfg.classes == 0 || cfg.n_frames == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(Error::config("synthetic dataset dimensions must be positive"));
    }
    let mut records = Vec::new();
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Val, cfg.val_per_class)] {
        for i in 0..per_class {
            for label in 0..cfg.classes {
                let id = format!("{split}_{label}_{i:03}");
                let rel = PathBuf::from("videos").join(&id);
                let abs = dir.join(&rel);
                std::fs::create_dir_all(&abs)?;
                let mut rng = Rng::fork(cfg.seed, &id);
                for (t, frame) in stripes(cfg, label, &mut rng).into_iter().enumerate() {
                    write_frame(&frame_path(&abs, t), &frame)?;
                }
                records.push(VideoRecord {
                    id,
                    frame_dir: rel,
                    n_frames: cfg.n_frames,
                    label,
                    split,
                });
            }
        }
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

fn stripes(cfg: &SyntheticConfig, label: usize, rng: &mut Rng) -> Vec<Frame> {
    let theta = label as f64 * PI / cfg.classes as f64;
    let (ux, uy) = (theta.cos(), theta.sin());
    let period = 8.0 + 8.0 * rng.uniform();
    let phase = 2.0 * PI * rng.uniform();
    let speed = 0.2 + 0.4 * rng.uniform();
    let base: [f64; 3] = [0, 1, 2].map(|_| 70.0 + 110.0 * rng.uniform());
    let amp = 50.0 + 20.0 * rng.uniform();
    (0..cfg.n_frames)
        .map(|t| {
            let mut pixels = Vec::with_capacity(cfg.width * cfg.height * 3);
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    let u = x as f64 * ux + y as f64 * uy;
                    let s = (2.0 * PI * u / period + phase + speed * t as f64).sin();
                    for b in base {
                        let noise = 20.0 * (rng.uniform() - 0.5);
                        pixels.push((b + amp * s + noise).round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
            Frame::new(cfg.width, cfg.height, pixels)
        })
        .collect()
}
