//! Max / average pooling over `(t, h, w)` windows and global average pooling.
//!
//! Padded positions never take part: a max window only looks at real
//! elements and an average window divides by the number of real elements.

use serde::{Deserialize, Serialize};

use super::{window_output, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolGeometry {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Self {
        PoolGeometry {
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || 2 * self.padding[a] > self.kernel[a] {
                return Err(Error::Config(format!(
                    "pool window {:?} stride {:?} padding {:?} admits empty windows",
                    self.kernel, self.stride, self.padding
                )));
            }
        }
        let mut out = input.0;
        for a in 0..3 {
            out[a + 2] = window_output(
                "pool3d",
                a + 2,
                input.0[a + 2],
                self.kernel[a],
                self.stride[a],
                self.padding[a],
            )?;
        }
        Ok(Shape(out))
    }
}

pub fn pool3d(input: &Tensor, mode: PoolMode, geometry: PoolGeometry) -> Result<Tensor> {
    Ok(match mode {
        PoolMode::Max => max_forward(input, &geometry, false)?.0,
        PoolMode::Avg => avg_forward(input, &geometry)?,
    })
}

/// Clamped input range covered by output index `o` along one axis.
#[inline]
fn span(o: usize, stride: usize, pad: usize, kernel: usize, len: usize) -> (usize, usize) {
    let start = (o * stride) as isize - pad as isize;
    let end = start + kernel as isize;
    (start.max(0) as usize, (end.min(len as isize)).max(0) as usize)
}

/// Returns the pooled tensor and, when requested, the flat input index of
/// each window's maximum (first occurrence on ties).
pub(crate) fn max_forward(
    input: &Tensor,
    g: &PoolGeometry,
    keep_argmax: bool,
) -> Result<(Tensor, Vec<usize>)> {
    let is = input.shape();
    let os = g.output_shape(is)?;
    let mut out = Tensor::zeros(os);
    let mut argmax = if keep_argmax { vec![0usize; os.numel()] } else { Vec::new() };
    let [t, h, w] = is.volume();
    let [ot, oh, ow] = os.volume();
    let x = input.data();
    let y = out.data_mut();
    let mut o = 0;
    for plane in 0..is.n() * is.c() {
        let base = plane * t * h * w;
        for zt in 0..ot {
            let (t0, t1) = span(zt, g.stride[0], g.padding[0], g.kernel[0], t);
            for zh in 0..oh {
                let (h0, h1) = span(zh, g.stride[1], g.padding[1], g.kernel[1], h);
                for zw in 0..ow {
                    let (w0, w1) = span(zw, g.stride[2], g.padding[2], g.kernel[2], w);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for it in t0..t1 {
                        for ih in h0..h1 {
                            let row = base + (it * h + ih) * w;
                            for i in row + w0..row + w1 {
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    if best_i == usize::MAX {
                        return Err(Error::config("pool3d: empty window"));
                    }
                    y[o] = best;
                    if keep_argmax {
                        argmax[o] = best_i;
                    }
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn max_backward(input_shape: Shape, argmax: &[usize], dy: &[f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_shape.numel()];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

pub(crate) fn avg_forward(input: &Tensor, g: &PoolGeometry) -> Result<Tensor> {
    let is = input.shape();
    let os = g.output_shape(is)?;
    let mut out = Tensor::zeros(os);
    let [t, h, w] = is.volume();
    let [ot, oh, ow] = os.volume();
    let x = input.data();
    let y = out.data_mut();
    let mut o = 0;
    for plane in 0..is.n() * is.c() {
        let base = plane * t * h * w;
        for zt in 0..ot {
            let (t0, t1) = span(zt, g.stride[0], g.padding[0], g.kernel[0], t);
            for zh in 0..oh {
                let (h0, h1) = span(zh, g.stride[1], g.padding[1], g.kernel[1], h);
                for zw in 0..ow {
                    let (w0, w1) = span(zw, g.stride[2], g.padding[2], g.kernel[2], w);
                    let count = (t1 - t0) * (h1 - h0) * (w1 - w0);
                    if count == 0 {
                        return Err(Error::config("pool3d: empty window"));
                    }
                    let mut acc = 0.0f32;
                    for it in t0..t1 {
                        for ih in h0..h1 {
                            let row = base + (it * h + ih) * w;
                            acc += x[row + w0..row + w1].iter().sum::<f32>();
                        }
                    }
                    y[o] = acc / count as f32;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_backward(input_shape: Shape, g: &PoolGeometry, dy: &[f32]) -> Vec<f32> {
    let os = g.output_shape(input_shape).expect("validated in forward");
    let [t, h, w] = input_shape.volume();
    let [ot, oh, ow] = os.volume();
    let mut dx = vec![0.0f32; input_shape.numel()];
    let mut o = 0;
    for plane in 0..input_shape.n() * input_shape.c() {
        let base = plane * t * h * w;
        for zt in 0..ot {
            let (t0, t1) = span(zt, g.stride[0], g.padding[0], g.kernel[0], t);
            for zh in 0..oh {
                let (h0, h1) = span(zh, g.stride[1], g.padding[1], g.kernel[1], h);
                for zw in 0..ow {
                    let (w0, w1) = span(zw, g.stride[2], g.padding[2], g.kernel[2], w);
                    let share = dy[o] / ((t1 - t0) * (h1 - h0) * (w1 - w0)) as f32;
                    for it in t0..t1 {
                        for ih in h0..h1 {
                            let row = base + (it * h + ih) * w;
                            dx[row + w0..row + w1].iter_mut().for_each(|v| *v += share);
                        }
                    }
                    o += 1;
                }
            }
        }
    }
    dx
}

/// Mean over all `(t, h, w)` positions: `(n, c, t, h, w) -> (n, c, 1, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    let p = s.plane();
    if p == 0 {
        return Err(Error::config("global_avg_pool: empty spatio-temporal extent"));
    }
    let data = input
        .data()
        .chunks(p)
        .map(|c| (c.iter().map(|&v| f64::from(v)).sum::<f64>() / p as f64) as f32)
        .collect();
    Tensor::from_vec(Shape::new(s.n(), s.c(), 1, 1, 1), data)
}

pub(crate) fn global_avg_backward(input_shape: Shape, dy: &[f32]) -> Vec<f32> {
    let p = input_shape.plane();
    let mut dx = Vec::with_capacity(input_shape.numel());
    for &g in dy {
        dx.extend(std::iter::repeat_n(g / p as f32, p));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn max_and_avg_of_square_window() {
        let g = PoolGeometry::new([1, 2, 2], [1, 2, 2], [0, 0, 0]);
        assert_eq!(pool3d(&square(), PoolMode::Max, g).unwrap().data(), &[4.0]);
        assert_eq!(pool3d(&square(), PoolMode::Avg, g).unwrap().data(), &[2.5]);
    }

    #[test]
    fn stem_pool_shape() {
        let g = PoolGeometry::new([3; 3], [2; 3], [1; 3]);
        assert_eq!(
            g.output_shape(Shape::new(1, 64, 16, 56, 56)).unwrap(),
            Shape::new(1, 64, 8, 28, 28)
        );
    }

    #[test]
    fn max_ignores_padding_for_negative_inputs() {
        let x = Tensor::full(Shape::new(1, 1, 1, 2, 2), -5.0);
        let g = PoolGeometry::new([1, 3, 3], [1, 1, 1], [0, 1, 1]);
        let y = pool3d(&x, PoolMode::Max, g).unwrap();
        assert!(y.data().iter().all(|&v| v == -5.0));
    }

    #[test]
    fn avg_excludes_padding_from_count() {
        let x = Tensor::full(Shape::new(1, 1, 1, 2, 2), 3.0);
        let g = PoolGeometry::new([1, 3, 3], [1, 1, 1], [0, 1, 1]);
        let y = pool3d(&x, PoolMode::Avg, g).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn oversized_padding_is_a_config_error() {
        let g = PoolGeometry::new([2, 2, 2], [1, 1, 1], [2, 2, 2]);
        assert!(matches!(
            g.output_shape(Shape::new(1, 1, 4, 4, 4)),
            Err(Error::Config(_))
        ));
        let z = PoolGeometry::new([0, 2, 2], [1, 1, 1], [0, 0, 0]);
        assert!(z.output_shape(Shape::new(1, 1, 4, 4, 4)).is_err());
    }

    #[test]
    fn global_pool_of_constant() {
        let x = Tensor::full(Shape::new(1, 512, 1, 4, 4), 3.0);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 512, 1, 1, 1));
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn global_pool_matches_flat_loop() {
        let shape = Shape::new(2, 3, 2, 3, 4);
        let x = Tensor::from_vec(shape, (0..shape.numel()).map(|i| (i as f32 * 0.37).sin()).collect())
            .unwrap();
        let y = global_avg_pool(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut sum = 0.0f32;
                let mut count = 0;
                for t in 0..2 {
                    for h in 0..3 {
                        for w in 0..4 {
                            sum += x.at(n, c, t, h, w);
                            count += 1;
                        }
                    }
                }
                assert!((y.at(n, c, 0, 0, 0) - sum / count as f32).abs() <= 1e-6);
            }
        }
    }
}
