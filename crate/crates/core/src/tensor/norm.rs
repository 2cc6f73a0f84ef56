//! Batch normalization over the `(n, t, h, w)` positions of each channel.
//!
//! Normalization uses the biased (1/N) batch variance. Running statistics
//! follow `r <- (1 - momentum) * r + momentum * batch`, where the running
//! variance receives the unbiased estimate (N / (N - 1) correction) when
//! N > 1.

use super::{check_axis, Shape, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
    pub training: bool,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            training: true,
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        for (what, len) in [
            ("gamma", self.gamma.len()),
            ("beta", self.beta.len()),
            ("running_mean", self.running_mean.len()),
            ("running_var", self.running_var.len()),
        ] {
            if len != channels {
                return Err(Error::Config(format!(
                    "batch norm {what} has {len} entries for {channels} channels"
                )));
            }
        }
        Ok(())
    }
}

/// Applies batch normalization; in training mode the running statistics
/// are updated in place.
pub fn batch_norm(input: &Tensor, params: &mut BatchNormParams) -> Result<Tensor> {
    params.validate(input.shape().c())?;
    if params.training {
        let out = forward_batch(input, &params.gamma, &params.beta, params.eps, false)?;
        update_running(
            &mut params.running_mean,
            &mut params.running_var,
            &out.mean,
            &out.var,
            count(input.shape()),
            params.momentum,
        );
        Ok(out.output)
    } else {
        Ok(forward_running(
            input,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.eps,
            false,
        )
        .output)
    }
}

pub(crate) struct BnForward {
    pub output: Tensor,
    /// Normalized input, kept only when a backward pass will need it.
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Batch mean and biased variance (training mode only).
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

pub(crate) fn count(shape: Shape) -> usize {
    shape.n() * shape.plane()
}

pub(crate) fn forward_batch(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    keep_xhat: bool,
) -> Result<BnForward> {
    let s = x.shape();
    let (n, c, p) = (s.n(), s.c(), s.plane());
    check_axis("batch_norm", 1, gamma.len(), c)?;
    let m = n * p;
    if m == 0 {
        return Err(Error::DegenerateBatch { channel: 0 });
    }
    let xs = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * p;
            sum += xs[off..off + p].iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        let mu = sum / m as f64;
        let mut sq = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * p;
            sq += xs[off..off + p]
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m as f64) as f32;
    }
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (f64::from(v) + f64::from(eps)).sqrt()) as f32)
        .collect();
    Ok(normalize(x, gamma, beta, &mean, &inv_std, keep_xhat, var))
}

pub(crate) fn forward_running(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
    keep_xhat: bool,
) -> BnForward {
    let inv_std: Vec<f32> = running_var
        .iter()
        .map(|&v| (1.0 / (f64::from(v) + f64::from(eps)).sqrt()) as f32)
        .collect();
    let mut out = normalize(x, gamma, beta, running_mean, &inv_std, keep_xhat, Vec::new());
    out.mean = Vec::new();
    out
}

fn normalize(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    inv_std: &[f32],
    keep_xhat: bool,
    var: Vec<f32>,
) -> BnForward {
    let s = x.shape();
    let (n, c, p) = (s.n(), s.c(), s.plane());
    let mut out = Tensor::zeros(s);
    let mut xhat = if keep_xhat { vec![0.0f32; x.numel()] } else { Vec::new() };
    let xs = x.data();
    let ys = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * p;
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + p {
                let h = (xs[i] - mu) * is;
                ys[i] = g * h + bt;
                if keep_xhat {
                    xhat[i] = h;
                }
            }
        }
    }
    BnForward {
        output: out,
        xhat,
        inv_std: inv_std.to_vec(),
        mean: mean.to_vec(),
        var,
    }
}

pub(crate) fn update_running(
    running_mean: &mut [f32],
    running_var: &mut [f32],
    batch_mean: &[f32],
    batch_var: &[f32],
    count: usize,
    momentum: f32,
) {
    let correction = if count > 1 {
        count as f32 / (count - 1) as f32
    } else {
        1.0
    };
    for ch in 0..running_mean.len() {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * batch_mean[ch];
        running_var[ch] =
            (1.0 - momentum) * running_var[ch] + momentum * batch_var[ch] * correction;
    }
}

pub(crate) struct BnGrads {
    pub dx: Option<Vec<f32>>,
    pub dgamma: Vec<f32>,
    pub dbeta: Vec<f32>,
}

/// `batch_stats` selects the training-mode rule, where the mean and variance
/// depend on the input.
pub(crate) fn backward(
    shape: Shape,
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    dy: &[f32],
    batch_stats: bool,
    need_x: bool,
) -> BnGrads {
    let (n, c, p) = (shape.n(), shape.c(), shape.plane());
    let m = (n * p) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut sums = vec![(0.0f64, 0.0f64); c];
    for b in 0..n {
        for (ch, s) in sums.iter_mut().enumerate() {
            let off = (b * c + ch) * p;
            for i in off..off + p {
                s.0 += f64::from(dy[i]);
                s.1 += f64::from(dy[i]) * f64::from(xhat[i]);
            }
        }
    }
    for ch in 0..c {
        dbeta[ch] = sums[ch].0 as f32;
        dgamma[ch] = sums[ch].1 as f32;
    }
    let dx = need_x.then(|| {
        let mut dx = vec![0.0f32; shape.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                let scale = gamma[ch] * inv_std[ch];
                if batch_stats {
                    let mean_dy = (sums[ch].0 / m) as f32;
                    let mean_dy_xhat = (sums[ch].1 / m) as f32;
                    for i in off..off + p {
                        dx[i] = scale * (dy[i] - mean_dy - xhat[i] * mean_dy_xhat);
                    }
                } else {
                    for i in off..off + p {
                        dx[i] = scale * dy[i];
                    }
                }
            }
        }
        dx
    });
    BnGrads { dx, dgamma, dbeta }
}
