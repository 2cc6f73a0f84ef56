//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each primitive appends a node holding its output and whatever it needs
//! for the backward rule. Nodes are only ever appended, so inputs always
//! precede outputs and [`Tape::backward`] simply walks the nodes in reverse.
//!
//! ```
//! use st3d::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0).with_grad());
//! let y = tape.add(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0]);
//! ```

use super::conv::{self, ConvGeometry};
use super::norm;
use super::ops;
use super::pool::{self, PoolGeometry, PoolMode};
use super::{check_axis, Shape, Tensor, AXES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Statistics a batch-norm node normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a> {
    /// Per-channel mean and biased variance of the current batch.
    Batch,
    Running { mean: &'a [f32], var: &'a [f32] },
}

enum Op {
    Leaf,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        geometry: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geometry: PoolGeometry,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    ShortcutA {
        x: Var,
        stride: [usize; 3],
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        scores: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape for forward-only evaluation: nothing requires a gradient and
    /// no backward state is kept.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: self.record && needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input tensor; it is differentiated if `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Records a copy of a model parameter identified by `key`. Gradients
    /// for it are reported by [`Tape::param_grads`].
    pub fn param(&mut self, key: usize, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.grad = None;
        let needs = tensor.requires_grad;
        self.push(value, Op::Param(key), needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// `(key, gradient)` for every parameter node that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.nodes.iter().filter_map(|n| match (&n.op, &n.value.grad) {
            (Op::Param(key), Some(g)) => Some((*key, g.as_slice())),
            _ => None,
        })
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geometry: &ConvGeometry) -> Result<Var> {
        check_axis("conv3d", 0, geometry.out_channels, self.shape(w).n())?;
        if self.shape(w) != geometry.weight_shape() {
            return Err(Error::Config(format!(
                "conv weight {} does not match geometry {}",
                self.shape(w),
                geometry.weight_shape()
            )));
        }
        let out = conv::forward(self.value(x), self.value(w).data(), geometry)?;
        let needs = self.needs(&[x, w]);
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                geometry: *geometry,
            },
            needs,
        ))
    }

    /// Batch normalization. With [`BnStats::Batch`] the batch mean and
    /// biased variance are returned so the caller can update running
    /// statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
        eps: f32,
    ) -> Result<(Var, Option<(Vec<f32>, Vec<f32>)>)> {
        let c = self.shape(x).c();
        check_axis("batch_norm", 1, c, self.value(gamma).numel())?;
        check_axis("batch_norm", 1, c, self.value(beta).numel())?;
        let needs = self.needs(&[x, gamma, beta]);
        let keep = needs;
        let (fwd, batch) = match stats {
            BnStats::Batch => {
                let f = norm::forward_batch(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    eps,
                    keep,
                )?;
                let stats = (f.mean.clone(), f.var.clone());
                (f, Some(stats))
            }
            BnStats::Running { mean, var } => {
                check_axis("batch_norm", 1, c, mean.len())?;
                check_axis("batch_norm", 1, c, var.len())?;
                let f = norm::forward_running(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    mean,
                    var,
                    eps,
                    keep,
                );
                (f, None)
            }
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: fwd.xhat,
            inv_std: if keep { fwd.inv_std } else { Vec::new() },
            batch_stats: batch.is_some(),
        };
        Ok((self.push(fwd.output, op, needs), batch))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn pool3d(&mut self, x: Var, mode: PoolMode, geometry: PoolGeometry) -> Result<Var> {
        let needs = self.needs(&[x]);
        match mode {
            PoolMode::Max => {
                let (out, argmax) = pool::max_forward(self.value(x), &geometry, needs)?;
                Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
            }
            PoolMode::Avg => {
                let out = pool::avg_forward(self.value(x), &geometry)?;
                Ok(self.push(out, Op::AvgPool { x, geometry }, needs))
            }
        }
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = pool::global_avg_pool(self.value(x))?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::GlobalAvgPool(x), needs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a), self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        for axis in 0..5 {
            if sa.0[axis] != sb.0[axis] {
                return Err(Error::Shape {
                    op: "add",
                    axis: AXES[axis],
                    expected: sa.0[axis],
                    found: sb.0[axis],
                });
            }
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(p, q)| p + q)
            .collect();
        let out = Tensor::from_vec(sa, data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape(), v.data().iter().map(|&e| e * factor).collect())
            .expect("same shape");
        let needs = self.needs(&[x]);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn shortcut_a(&mut self, x: Var, out_channels: usize, stride: [usize; 3]) -> Result<Var> {
        let out = ops::shortcut_a(self.value(x), out_channels, stride)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::ShortcutA { x, stride }, needs))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| f64::from(v)).sum::<f64>() as f32;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn softmax_cross_entropy(&mut self, scores: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(scores), labels)?;
        let needs = self.needs(&[scores]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                scores,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Propagates `d loss / d node` to every leaf and parameter that
    /// requires a gradient, adding into any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::NotScalar { numel });
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let want = |v: &Var| nodes[v.0].needs_grad;
            let mut emit = |v: Var, contribution: Vec<f32>| match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += *b),
                slot @ None => *slot = Some(contribution),
            };
            match &nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    self.nodes[i].value.accumulate_grad(&g);
                }
                Op::Conv { x, w, geometry } => {
                    let (dx, dw) = conv::backward(
                        &nodes[x.0].value,
                        nodes[w.0].value.data(),
                        geometry,
                        &g,
                        want(x),
                        want(w),
                    );
                    if let Some(dx) = dx {
                        emit(*x, dx);
                    }
                    if let Some(dw) = dw {
                        emit(*w, dw);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let r = norm::backward(
                        nodes[x.0].value.shape(),
                        xhat,
                        inv_std,
                        nodes[gamma.0].value.data(),
                        &g,
                        *batch_stats,
                        want(x),
                    );
                    if want(gamma) {
                        emit(*gamma, r.dgamma);
                    }
                    if want(beta) {
                        emit(*beta, r.dbeta);
                    }
                    if let Some(dx) = r.dx {
                        emit(*x, dx);
                    }
                }
                Op::Relu(x) => {
                    let y = nodes[i].value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    emit(*x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    emit(*x, pool::max_backward(nodes[x.0].value.shape(), argmax, &g));
                }
                Op::AvgPool { x, geometry } => {
                    emit(*x, pool::avg_backward(nodes[x.0].value.shape(), geometry, &g));
                }
                Op::GlobalAvgPool(x) => {
                    emit(*x, pool::global_avg_backward(nodes[x.0].value.shape(), &g));
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) =
                        ops::linear_backward(&nodes[x.0].value, &nodes[w.0].value, &g);
                    if want(x) {
                        emit(*x, dx);
                    }
                    if want(w) {
                        emit(*w, dw);
                    }
                    if want(b) {
                        emit(*b, db);
                    }
                }
                Op::Concat(a, b) => {
                    let sa = nodes[a.0].value.shape();
                    let sb = nodes[b.0].value.shape();
                    let (pa, pb) = (sa.per_sample(), sb.per_sample());
                    let mut ga = Vec::with_capacity(sa.numel());
                    let mut gb = Vec::with_capacity(sb.numel());
                    for row in g.chunks((pa + pb).max(1)).take(sa.n()) {
                        ga.extend_from_slice(&row[..pa]);
                        gb.extend_from_slice(&row[pa..]);
                    }
                    if want(a) {
                        emit(*a, ga);
                    }
                    if want(b) {
                        emit(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if want(a) {
                        emit(*a, g.clone());
                    }
                    if want(b) {
                        emit(*b, g);
                    }
                }
                Op::Scale(x, factor) => {
                    emit(*x, g.iter().map(|&v| v * factor).collect());
                }
                Op::ShortcutA { x, stride } => {
                    let dy = Tensor::from_vec(nodes[i].value.shape(), g)?;
                    emit(*x, ops::shortcut_a_backward(nodes[x.0].value.shape(), *stride, &dy));
                }
                Op::Sum(x) => {
                    emit(*x, vec![g[0]; nodes[x.0].value.numel()]);
                }
                Op::SoftmaxCrossEntropy {
                    scores,
                    labels,
                    probs,
                } => {
                    emit(*scores, ops::softmax_cross_entropy_backward(probs, labels, g[0]));
                }
            }
        }
        Ok(())
    }
}
