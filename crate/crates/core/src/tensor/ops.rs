//! Shape-simple primitives: ReLU, linear, channel concat/slice, residual
//! subsample-and-pad, softmax and cross-entropy.

use super::{check_axis, Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// `x (n x f) * weight^T (f x classes) + bias`. The input is read as a
/// matrix with everything after the batch axis flattened; the weight is
/// `(classes, f, 1, 1, 1)` and the bias `(classes, 1, 1, 1, 1)`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.shape().n();
    let f = input.shape().per_sample();
    let classes = weight.shape().n();
    check_axis("linear", 1, weight.shape().per_sample(), f)?;
    check_axis("linear", 0, classes, bias.numel())?;
    let mut out = Tensor::zeros(Shape::matrix(n, classes));
    if n > 0 && f > 0 && classes > 0 {
        unsafe {
            matrixmultiply::sgemm(
                n,
                f,
                classes,
                1.0,
                input.data().as_ptr(),
                f as isize,
                1,
                weight.data().as_ptr(),
                1,
                f as isize,
                0.0,
                out.data_mut().as_mut_ptr(),
                classes as isize,
                1,
            );
        }
    }
    let b = bias.data();
    for row in out.data_mut().chunks_mut(classes.max(1)) {
        row.iter_mut().zip(b).for_each(|(y, bb)| *y += *bb);
    }
    Ok(out)
}

/// Returns `(d_input, d_weight, d_bias)` for [`linear`].
pub(crate) fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    dy: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = input.shape().n();
    let f = input.shape().per_sample();
    let classes = weight.shape().n();
    let mut dx = vec![0.0f32; n * f];
    let mut dw = vec![0.0f32; classes * f];
    let mut db = vec![0.0f32; classes];
    if n > 0 && f > 0 && classes > 0 {
        unsafe {
            // dX (n x f) = dY (n x classes) * W (classes x f)
            matrixmultiply::sgemm(
                n,
                classes,
                f,
                1.0,
                dy.as_ptr(),
                classes as isize,
                1,
                weight.data().as_ptr(),
                f as isize,
                1,
                0.0,
                dx.as_mut_ptr(),
                f as isize,
                1,
            );
            // dW (classes x f) = dY^T (classes x n) * X (n x f)
            matrixmultiply::sgemm(
                classes,
                n,
                f,
                1.0,
                dy.as_ptr(),
                1,
                classes as isize,
                input.data().as_ptr(),
                f as isize,
                1,
                0.0,
                dw.as_mut_ptr(),
                f as isize,
                1,
            );
        }
    }
    for row in dy.chunks(classes.max(1)) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
    }
    (dx, dw, db)
}

fn check_non_channel(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    for axis in [0, 2, 3, 4] {
        check_axis(op, axis, a.0[axis], b.0[axis])?;
    }
    Ok(())
}

/// `a` channels first, then `b`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    check_non_channel("concat_channels", sa, sb)?;
    let out_shape = sa.with_channels(sa.c() + sb.c());
    let (pa, pb) = (sa.per_sample(), sb.per_sample());
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n() {
        data.extend_from_slice(&a.data()[n * pa..(n + 1) * pa]);
        data.extend_from_slice(&b.data()[n * pb..(n + 1) * pb]);
    }
    Tensor::from_vec(out_shape, data)
}

/// Channels `start..end` of every sample.
pub fn slice_channels(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let s = x.shape();
    if start > end || end > s.c() {
        return Err(Error::Config(format!(
            "channel slice {start}..{end} out of range for {} channels",
            s.c()
        )));
    }
    let p = s.plane();
    let per = s.per_sample();
    let mut data = Vec::with_capacity(s.n() * (end - start) * p);
    for n in 0..s.n() {
        data.extend_from_slice(&x.data()[n * per + start * p..n * per + end * p]);
    }
    Tensor::from_vec(s.with_channels(end - start), data)
}

/// Parameter-free residual path: keep every `stride`-th position on each
/// axis (a 1x1x1 average pool) and zero-fill channels up to `out_channels`.
pub fn shortcut_a(input: &Tensor, out_channels: usize, stride: [usize; 3]) -> Result<Tensor> {
    let s = input.shape();
    if out_channels < s.c() {
        return Err(Error::Config(format!(
            "zero-padding shortcut cannot shrink {} channels to {out_channels}",
            s.c()
        )));
    }
    if stride.contains(&0) {
        return Err(Error::config("shortcut stride must be positive"));
    }
    let [t, h, w] = s.volume();
    let [ot, oh, ow] = [
        (t - 1) / stride[0] + 1,
        (h - 1) / stride[1] + 1,
        (w - 1) / stride[2] + 1,
    ];
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::config("shortcut on empty volume"));
    }
    let out_shape = Shape::new(s.n(), out_channels, ot, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let x = input.data();
    let y = out.data_mut();
    for n in 0..s.n() {
        for c in 0..s.c() {
            for zt in 0..ot {
                for zh in 0..oh {
                    let src = (((n * s.c() + c) * t + zt * stride[0]) * h + zh * stride[1]) * w;
                    let dst = (((n * out_channels + c) * ot + zt) * oh + zh) * ow;
                    for zw in 0..ow {
                        y[dst + zw] = x[src + zw * stride[2]];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn shortcut_a_backward(input_shape: Shape, stride: [usize; 3], dy: &Tensor) -> Vec<f32> {
    let s = input_shape;
    let [t, h, w] = s.volume();
    let os = dy.shape();
    let [ot, oh, ow] = os.volume();
    let mut dx = vec![0.0f32; s.numel()];
    let g = dy.data();
    for n in 0..s.n() {
        for c in 0..s.c() {
            for zt in 0..ot {
                for zh in 0..oh {
                    let dst = (((n * s.c() + c) * t + zt * stride[0]) * h + zh * stride[1]) * w;
                    let src = (((n * os.c() + c) * ot + zt) * oh + zh) * ow;
                    for zw in 0..ow {
                        dx[dst + zw * stride[2]] = g[src + zw];
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax of an `(n, classes, 1, 1, 1)` score matrix, computed
/// with max subtraction.
pub fn softmax(scores: &Tensor) -> Tensor {
    let classes = scores.shape().per_sample();
    let mut out = scores.clone();
    out.requires_grad = false;
    out.grad = None;
    for row in out.data_mut().chunks_mut(classes.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = f64::from(*v - max).exp();
        *v = e as f32;
        sum += e;
    }
    for v in row.iter_mut() {
        *v = (f64::from(*v) / sum) as f32;
    }
}

/// Mean over the batch of `-log softmax(scores)[label]`, plus the softmax
/// probabilities for reuse in the gradient `(p - onehot) / n`.
pub fn softmax_cross_entropy(scores: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let n = scores.shape().n();
    let classes = scores.shape().per_sample();
    check_axis("softmax_cross_entropy", 0, n, labels.len())?;
    if n == 0 {
        return Err(Error::config("cross-entropy over an empty batch"));
    }
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = scores.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln() + f64::from(max);
        total += lse - f64::from(row[label]);
    }
    Ok(((total / n as f64) as f32, softmax(scores)))
}

pub(crate) fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], dloss: f32) -> Vec<f32> {
    let classes = probs.shape().per_sample();
    let n = probs.shape().n();
    let scale = dloss / n as f32;
    let mut g = probs.data().to_vec();
    for (i, &label) in labels.iter().enumerate() {
        g[i * classes + label] -= 1.0;
    }
    g.iter_mut().for_each(|v| *v *= scale);
    g
}
