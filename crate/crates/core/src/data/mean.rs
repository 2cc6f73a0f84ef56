//! Per-channel dataset mean and its three-line text file.

use std::path::Path;

use super::frames::{frame_path, read_frame};
use super::manifest::VideoRecord;
use crate::error::{Error, Result};

/// Pixel-frame budget above which frames are subsampled with a uniform stride.
pub const MEAN_PIXEL_BUDGET: u64 = 1_000_000;

/// Mean R, G, B value (0..255 scale) over the frames of `records`. Every
/// frame is visited when the total pixel count fits the budget; otherwise
/// every `stride`-th frame in manifest order.
pub fn compute_channel_mean(records: &[VideoRecord]) -> Result<[f64; 3]> {
    compute_channel_mean_with_budget(records, MEAN_PIXEL_BUDGET)
}

pub fn compute_channel_mean_with_budget(records: &[VideoRecord], budget: u64) -> Result<[f64; 3]> {
    let mut total: u64 = 0;
    let mut frames: u64 = 0;
    for r in records {
        let f = read_frame(&frame_path(&r.frame_dir, 0))?;
        total += (f.width * f.height) as u64 * r.n_frames as u64;
        frames += r.n_frames as u64;
    }
    if frames == 0 {
        return Err(Error::Data("no frames to compute a mean over".into()));
    }
    let stride = total.div_ceil(budget.max(1)).max(1);
    let mut sums = [0f64; 3];
    let mut count: u64 = 0;
    let mut g: u64 = 0;
    for r in records {
        for i in 0..r.n_frames {
            if g % stride == 0 {
                let f = read_frame(&frame_path(&r.frame_dir, i))?;
                for px in f.pixels.chunks_exact(3) {
                    for ch in 0..3 {
                        sums[ch] += px[ch] as f64;
                    }
                }
                count += (f.width * f.height) as u64;
            }
            g += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no readable pixels".into()));
    }
    Ok(sums.map(|s| s / count as f64))
}

pub fn write_mean_file(path: impl AsRef<Path>, mean: [f64; 3]) -> Result<()> {
    let text = format!("{:?}\n{:?}\n{:?}\n", mean[0], mean[1], mean[2]);
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_mean_file(path: impl AsRef<Path>) -> Result<[f32; 3]> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let values: Vec<f32> = text
        .split_whitespace()
        .map(|v| v.parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    match values[..] {
        [r, g, b] => Ok([r, g, b]),
        _ => Err(Error::Data(format!(
            "{}: expected 3 values, found {}",
            path.display(),
            values.len()
        ))),
    }
}
