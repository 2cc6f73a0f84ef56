//! Clip sampling, cropping and resizing.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::frames::{frame_path, read_frame, Frame};
use super::manifest::VideoRecord;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPosition {
    Center,
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::Center,
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the frame's short side.
    pub scales: Vec<f64>,
    pub clip_len: usize,
    pub out_size: usize,
    pub flip_prob: f64,
    /// Per-channel (R, G, B) mean on the 0..255 scale.
    pub channel_mean: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scales: (0..5).map(|i| 2f64.powf(-(i as f64) / 4.0)).collect(),
            clip_len: 16,
            out_size: 112,
            flip_prob: 0.5,
            channel_mean: [0.0; 3],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("augment.scales must not be empty"));
        }
        if let Some(s) = self.scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
            return Err(Error::Config(format!("augment.scales: {s} is outside (0, 1]")));
        }
        if self.clip_len == 0 {
            return Err(Error::config("augment.clip_len must be positive"));
        }
        if self.out_size == 0 {
            return Err(Error::config("augment.out_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "augment.flip_prob: {} is outside [0, 1]",
                self.flip_prob
            )));
        }
        if self.channel_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::config("augment.channel_mean must be finite"));
        }
        Ok(())
    }
}

/// The random choices behind a clip; rendering them again reproduces the clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub t_start: usize,
    pub position: CropPosition,
    pub scale: f64,
    pub flipped: bool,
}

#[derive(Clone, Debug)]
pub struct Clip {
    /// `(1, 3, L, S, S)`.
    pub tensor: Tensor,
    pub id: String,
    pub label: usize,
    pub provenance: Provenance,
}

/// `(t_start + j) mod n_frames` for `j` in `0..len`; short videos loop.
pub fn clip_indices(n_frames: usize, len: usize, t_start: usize) -> Vec<usize> {
    assert!(n_frames >= 1 && t_start < n_frames, "clip start out of range");
    (0..len).map(|j| (t_start + j) % n_frames).collect()
}

/// Starts of the non-overlapping inference windows: 0, L, 2L, ...
pub fn window_starts(n_frames: usize, len: usize) -> Vec<usize> {
    (0..n_frames).step_by(len.max(1)).collect()
}

/// Draws, in order: temporal start, crop position, scale, flip.
pub fn draw_provenance(n_frames: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Provenance {
    let t_start = rng.below(n_frames);
    let position = CropPosition::ALL[rng.below(5)];
    let scale = cfg.scales[rng.below(cfg.scales.len())];
    let flipped = rng.uniform() < cfg.flip_prob;
    Provenance {
        t_start,
        position,
        scale,
        flipped,
    }
}

/// Square crop `(x0, y0, side)` inside a `width x height` frame.
pub fn crop_box(width: usize, height: usize, position: CropPosition, scale: f64) -> (usize, usize, usize) {
    let short = width.min(height);
    let side = ((scale * short as f64).round() as usize).clamp(1, short);
    let (dx, dy) = (width - side, height - side);
    match position {
        CropPosition::Center => (dx / 2, dy / 2, side),
        CropPosition::TopLeft => (0, 0, side),
        CropPosition::TopRight => (dx, 0, side),
        CropPosition::BottomLeft => (0, dy, side),
        CropPosition::BottomRight => (dx, dy, side),
    }
}

/// Bilinear source taps for `out` samples over `side` pixels, using pixel
/// centres `(i + 0.5) * side / out - 0.5`, clamped to the crop.
fn taps(side: usize, out: usize) -> Vec<(usize, usize, f32)> {
    let ratio = side as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (side - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(side - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Crops, resizes and writes one frame into time slice `t` of `out`
/// (`(1, 3, L, S, S)`), mirrored if `flip`.
fn render_frame(frame: &Frame, prov: &Provenance, out: &mut Tensor, t: usize) {
    let shape = out.shape();
    let size = shape.w();
    let (x0, y0, side) = crop_box(frame.width, frame.height, prov.position, prov.scale);
    let tx = taps(side, size);
    let ty = taps(side, size);
    let (len, plane) = (shape.t(), size * size);
    let data = out.data_mut();
    for ch in 0..3 {
        let base = (ch * len + t) * plane;
        for (oy, &(ya, yb, fy)) in ty.iter().enumerate() {
            for (ox, &(xa, xb, fx)) in tx.iter().enumerate() {
                let p = |x: usize, y: usize| frame.at(x0 + x, y0 + y, ch) as f32;
                let top = p(xa, ya) + (p(xb, ya) - p(xa, ya)) * fx;
                let bottom = p(xa, yb) + (p(xb, yb) - p(xa, yb)) * fx;
                let v = top + (bottom - top) * fy;
                let col = if prov.flipped { size - 1 - ox } else { ox };
                data[base + oy * size + col] = v;
            }
        }
    }
}

/// Renders the clip described by `prov`, reading frames from disk.
pub fn render_clip(rec: &VideoRecord, cfg: &AugmentConfig, prov: &Provenance) -> Result<Clip> {
    let indices = clip_indices(rec.n_frames, cfg.clip_len, prov.t_start);
    let size = cfg.out_size;
    let mut tensor = Tensor::zeros(Shape::new(1, 3, cfg.clip_len, size, size));
    let mut cache: HashMap<usize, Frame> = HashMap::new();
    for (t, &idx) in indices.iter().enumerate() {
        if !cache.contains_key(&idx) {
            cache.insert(idx, read_frame(&frame_path(&rec.frame_dir, idx))?);
        }
        render_frame(&cache[&idx], prov, &mut tensor, t);
    }
    mean_subtract(&mut tensor, cfg.channel_mean);
    Ok(Clip {
        tensor,
        id: rec.id.clone(),
        label: rec.label,
        provenance: *prov,
    })
}

pub fn sample_training_clip(rec: &VideoRecord, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Clip> {
    let prov = draw_provenance(rec.n_frames, cfg, rng);
    render_clip(rec, cfg, &prov)
}

/// Center-cropped, unflipped clips at scale 1 over consecutive windows.
/// The final partial window loops back to the start of the video.
pub fn inference_clips(rec: &VideoRecord, cfg: &AugmentConfig) -> Result<Vec<Clip>> {
    if rec.n_frames == 0 {
        return Err(Error::Data(format!("video `{}` has no frames", rec.id)));
    }
    window_starts(rec.n_frames, cfg.clip_len)
        .into_iter()
        .map(|t_start| {
            let prov = Provenance {
                t_start,
                position: CropPosition::Center,
                scale: 1.0,
                flipped: false,
            };
            render_clip(rec, cfg, &prov)
        })
        .collect()
}

/// Reverses the width axis.
pub fn hflip(t: &Tensor) -> Tensor {
    let w = t.shape().w();
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// Subtracts a constant from each of the three channels.
pub fn mean_subtract(t: &mut Tensor, mean: [f32; 3]) {
    let shape = t.shape();
    let plane = shape.plane();
    assert_eq!(shape.c(), 3, "mean_subtract expects RGB channels");
    for (i, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let m = mean[i % 3];
        for v in chunk {
            *v -= m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_loop() {
        let v = clip_indices(10, 16, 0);
        assert_eq!(v, [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1, 2, 3, 4, 5]);
        assert_eq!(clip_indices(100, 16, 40), (40..56).collect::<Vec<_>>());
        assert_eq!(clip_indices(1, 16, 0), vec![0; 16]);
    }

    #[test]
    fn windows() {
        assert_eq!(window_starts(48, 16), [0, 16, 32]);
        assert_eq!(window_starts(40, 16), [0, 16, 32]);
        let third = clip_indices(40, 16, 32);
        assert_eq!(third, [32, 33, 34, 35, 36, 37, 38, 39, 0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(window_starts(8, 16), [0]);
    }

    #[test]
    fn crop_geometry() {
        assert_eq!(crop_box(320, 240, CropPosition::TopLeft, 0.5), (0, 0, 120));
        assert_eq!(crop_box(320, 240, CropPosition::Center, 1.0), (40, 0, 240));
        assert_eq!(crop_box(320, 240, CropPosition::BottomRight, 0.5), (200, 120, 120));
        assert_eq!(crop_box(64, 64, CropPosition::TopRight, 1.0), (0, 0, 64));
    }

    #[test]
    fn identity_resize_is_exact() {
        for (i, (a, _, f)) in taps(8, 8).into_iter().enumerate() {
            assert_eq!((a, f), (i, 0.0));
        }
        // Downscale by two averages neighbouring pixels.
        assert_eq!(taps(4, 2), vec![(0, 1, 0.5), (2, 3, 0.5)]);
    }

    #[test]
    fn flip_and_mean() {
        let t = Tensor::from_vec(Shape::new(1, 3, 1, 1, 4), (0..12).map(|v| v as f32).collect()).unwrap();
        let f = hflip(&t);
        assert_eq!(&f.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(hflip(&f).data(), t.data());
        let mut m = t.clone();
        mean_subtract(&mut m, [0.0, 4.0, 8.0]);
        assert_eq!(&m.data()[4..8], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(&m.data()[8..], &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn default_scales() {
        let s = AugmentConfig::default().scales;
        assert_eq!(s.len(), 5);
        assert_eq!(s[0], 1.0);
        assert!((s[2] - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[4], 0.5);
    }
}
