//! Dense 5-D tensors, the layer primitives and a reverse-mode tape.
//!
//! Every tensor is laid out row-major over `(n, c, t, h, w)`. Feature
//! matrices (classifier inputs, logits) are stored as `(n, f, 1, 1, 1)`.

pub mod conv;
pub mod norm;
pub mod ops;
pub mod pool;
pub mod tape;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{conv3d, ConvGeometry, ConvParams};
pub use norm::{batch_norm, BatchNormParams};
pub use pool::{global_avg_pool, pool3d, PoolGeometry, PoolMode};
pub use tape::{Tape, Var};

/// `(n, c, t, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 5]);

impl Shape {
    pub const fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape([n, c, t, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1, 1])
    }

    /// `(rows, cols, 1, 1, 1)`.
    pub const fn matrix(rows: usize, cols: usize) -> Self {
        Shape([rows, cols, 1, 1, 1])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn t(&self) -> usize {
        self.0[2]
    }
    pub fn h(&self) -> usize {
        self.0[3]
    }
    pub fn w(&self) -> usize {
        self.0[4]
    }

    /// `(t, h, w)`.
    pub fn volume(&self) -> [usize; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    /// Elements per sample in one channel.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3] * self.0[4]
    }

    /// Elements per sample.
    pub fn per_sample(&self) -> usize {
        self.0[1] * self.plane()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_channels(self, c: usize) -> Self {
        let mut s = self;
        s.0[1] = c;
        s
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, t, h, w] = self.0;
        write!(f, "({n},{c},{t},{h},{w})")
    }
}

pub(crate) const AXES: [&str; 5] = ["batch", "channel", "time", "height", "width"];

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Config(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Single-element tensor.
    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar {
                numel: self.data.len(),
            });
        }
        Ok(self.data[0])
    }

    pub fn offset(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        let [_, cc, tt, hh, ww] = self.shape.0;
        (((n * cc + c) * tt + t) * hh + h) * ww + w
    }

    pub fn at(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> f32 {
        self.data[self.offset(n, c, t, h, w)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Config(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), shape.numel());
        }
        Ok(self)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Copies of samples `start..end` along the batch axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Tensor {
        let per = self.shape.per_sample();
        let mut shape = self.shape;
        shape.0[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * per..end * per].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Stacks single samples (each with batch size 1 or more) along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::config("cannot stack zero tensors"))?;
        let mut shape = first.shape;
        shape.0[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            for (i, axis) in AXES.iter().enumerate().skip(1) {
                if p.shape.0[i] != first.shape.0[i] {
                    return Err(Error::Shape {
                        op: "stack",
                        axis,
                        expected: first.shape.0[i],
                        found: p.shape.0[i],
                    });
                }
            }
            shape.0[0] += p.shape.0[0];
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(shape, data)
    }

    /// Row `i` of an `(n, f, 1, 1, 1)` matrix, or sample `i` flattened.
    pub fn row(&self, i: usize) -> &[f32] {
        let per = self.shape.per_sample();
        &self.data[i * per..(i + 1) * per]
    }
}

pub(crate) fn check_axis(
    op: &'static str,
    axis: usize,
    expected: usize,
    found: usize,
) -> Result<()> {
    if expected != found {
        return Err(Error::Shape {
            op,
            axis: AXES[axis],
            expected,
            found,
        });
    }
    Ok(())
}

/// `floor((input + 2 * padding - kernel) / stride) + 1`, or an error naming
/// the axis when the window does not fit.
pub fn window_output(
    op: &'static str,
    axis: usize,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return Err(Error::EmptyOutput {
            op,
            axis: AXES[axis],
            input,
            kernel,
            stride,
            padding,
        });
    }
    Ok((padded - kernel) / stride + 1)
}
