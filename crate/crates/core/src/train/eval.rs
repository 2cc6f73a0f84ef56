//! Per-clip and per-video evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{inference_clips, AugmentConfig};
use crate::data::manifest::VideoRecord;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::ops::{softmax_cross_entropy, softmax_in_place};
use crate::tensor::Tensor;

/// Clips scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Anything that maps a batch of clips to class scores (logits).
pub trait ClipScorer: Sync {
    fn num_classes(&self) -> usize;
    /// `(n, 1+.., ...)` clips to `(n, C, 1, 1, 1)` logits.
    fn scores(&self, batch: &Tensor) -> Result<Tensor>;
}

impl ClipScorer for Network {
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn scores(&self, batch: &Tensor) -> Result<Tensor> {
        self.logits(batch)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` is among the `k` best classes, ranking by score and
/// then by lower index.
pub fn in_top_k(scores: &[f32], label: usize, k: usize) -> bool {
    let s = scores[label];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < label))
        .count();
    ahead < k
}

/// Element-wise mean of per-clip probability vectors.
pub fn average_scores(clip_probs: &[Vec<f32>]) -> Vec<f32> {
    let c = clip_probs.first().map_or(0, Vec::len);
    let mut acc = vec![0f64; c];
    for p in clip_probs {
        for (a, &v) in acc.iter_mut().zip(p) {
            *a += f64::from(v);
        }
    }
    acc.iter().map(|a| (a / clip_probs.len() as f64) as f32).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub id: String,
    pub label: usize,
    /// Mean of per-clip softmax scores.
    pub scores: Vec<f32>,
    pub predicted: usize,
    pub clips: usize,
    pub clips_correct: usize,
    /// Sum of per-clip cross-entropy losses.
    pub clip_loss_sum: f64,
}

/// Scores every sliding-window clip of `rec` and averages their softmax
/// outputs.
pub fn recognize_video<S: ClipScorer + ?Sized>(
    scorer: &S,
    rec: &VideoRecord,
    cfg: &AugmentConfig,
) -> Result<VideoPrediction> {
    let clips = inference_clips(rec, cfg)?;
    let mut probs = Vec::with_capacity(clips.len());
    let mut correct = 0;
    let mut loss_sum = 0f64;
    for chunk in clips.chunks(EVAL_BATCH) {
        let batch = Tensor::stack(&chunk.iter().map(|c| c.tensor.clone()).collect::<Vec<_>>())?;
        let logits = scorer.scores(&batch)?;
        for i in 0..chunk.len() {
            let row = logits.row(i);
            if rec.label < row.len() {
                let one = Tensor::from_vec(crate::tensor::Shape::matrix(1, row.len()), row.to_vec())?;
                loss_sum += f64::from(softmax_cross_entropy(&one, &[rec.label])?.0);
            } else {
                return Err(Error::LabelOutOfRange {
                    label: rec.label,
                    classes: row.len(),
                });
            }
            if argmax(row) == rec.label {
                correct += 1;
            }
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            probs.push(p);
        }
    }
    let scores = average_scores(&probs);
    Ok(VideoPrediction {
        id: rec.id.clone(),
        label: rec.label,
        predicted: argmax(&scores),
        scores,
        clips: probs.len(),
        clips_correct: correct,
        clip_loss_sum: loss_sum,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of windows whose own argmax is the label.
    pub clip_acc: f64,
    /// Mean cross-entropy over windows.
    pub clip_loss: f64,
    pub top1: f64,
    /// Top-min(5, C).
    pub top5: f64,
    /// `(top1 + top5) / 2`.
    pub average: f64,
    pub videos: usize,
    pub clips: usize,
}

impl Metrics {
    /// Video-level rates from `(label, averaged scores)` pairs. Clip fields
    /// are left at zero.
    pub fn from_scores<'a>(preds: impl IntoIterator<Item = (usize, &'a [f32])>) -> Result<Metrics> {
        let (mut n, mut hit1, mut hit5) = (0usize, 0usize, 0usize);
        for (label, scores) in preds {
            if label >= scores.len() {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: scores.len(),
                });
            }
            n += 1;
            hit1 += usize::from(argmax(scores) == label);
            hit5 += usize::from(in_top_k(scores, label, 5.min(scores.len())));
        }
        if n == 0 {
            return Err(Error::Data("no videos to evaluate".into()));
        }
        let top1 = hit1 as f64 / n as f64;
        let top5 = hit5 as f64 / n as f64;
        Ok(Metrics {
            clip_acc: 0.0,
            clip_loss: 0.0,
            top1,
            top5,
            average: (top1 + top5) / 2.0,
            videos: n,
            clips: 0,
        })
    }

    pub fn from_predictions(preds: &[VideoPrediction]) -> Result<Metrics> {
        let mut m = Self::from_scores(preds.iter().map(|p| (p.label, p.scores.as_slice())))?;
        let clips: usize = preds.iter().map(|p| p.clips).sum();
        let correct: usize = preds.iter().map(|p| p.clips_correct).sum();
        let loss: f64 = preds.iter().map(|p| p.clip_loss_sum).sum();
        m.clips = clips;
        m.clip_acc = correct as f64 / clips.max(1) as f64;
        m.clip_loss = loss / clips.max(1) as f64;
        Ok(m)
    }
}

/// Predictions for every record, in record order. Videos are scored in
/// parallel.
pub fn predict_videos<S: ClipScorer + ?Sized>(
    scorer: &S,
    records: &[VideoRecord],
    cfg: &AugmentConfig,
) -> Result<Vec<VideoPrediction>> {
    if records.is_empty() {
        return Err(Error::Data("no videos to evaluate".into()));
    }
    records
        .par_iter()
        .map(|r| recognize_video(scorer, r, cfg))
        .collect()
}

/// Per-clip accuracy and loss, each sliding window counted on its own.
pub fn evaluate_clips<S: ClipScorer + ?Sized>(
    scorer: &S,
    records: &[VideoRecord],
    cfg: &AugmentConfig,
) -> Result<(f64, f64)> {
    let m = Metrics::from_predictions(&predict_videos(scorer, records, cfg)?)?;
    Ok((m.clip_acc, m.clip_loss))
}

pub fn evaluate_videos<S: ClipScorer + ?Sized>(
    scorer: &S,
    records: &[VideoRecord],
    cfg: &AugmentConfig,
) -> Result<Metrics> {
    Metrics::from_predictions(&predict_videos(scorer, records, cfg)?)
}
