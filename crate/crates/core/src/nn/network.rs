//! Whole-network assembly: stem, four residual or dense stages, head.

use super::block::{make_block_with, Block, BlockConfig, BnLayer, Builder, ConvLayer, Ctx, Transition};
use super::block::{he_normal, BnUpdate};
use super::params::{under_prefix, ParamId, ParamKind, ParamStore};
use super::spec::{BlockVariant, NetworkSpec};
use super::summary::{ParamCount, ShapeReport, StageRow};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::norm::{update_running, DEFAULT_MOMENTUM};
use crate::tensor::{ConvGeometry, PoolGeometry, PoolMode, Shape, Tape, Tensor, Var};

pub const STEM_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub enum Stage {
    /// conv-BN-ReLU.
    Stem { conv: ConvLayer, bn: BnLayer },
    MaxPool(PoolGeometry),
    Blocks(Vec<Block>),
    Transition(Transition),
    /// BN-ReLU ahead of global pooling (pre-activation and dense nets).
    FinalNorm(BnLayer),
    GlobalPool,
    Classifier {
        weight: ParamId,
        bias: ParamId,
        in_features: usize,
        classes: usize,
    },
}

#[derive(Clone, Debug)]
pub struct NamedStage {
    pub name: String,
    pub stage: Stage,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    stages: Vec<NamedStage>,
    params: ParamStore,
}

/// Builds a network with weights drawn from `seed`.
pub fn make_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    Network::new(spec, &mut Rng::fork(seed, "init"))
}

impl Network {
    pub fn new(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(spec, Some(rng))
    }

    /// Same layout with zero weights and no random draws: cheap to build
    /// for shape and parameter inspection of large configurations.
    pub fn skeleton(spec: &NetworkSpec) -> Result<Self> {
        Self::build(spec, None)
    }

    fn build(spec: &NetworkSpec, rng: Option<&mut Rng>) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng,
        };
        let mut stages = Vec::new();
        let mut push = |name: &str, stage| {
            stages.push(NamedStage {
                name: name.to_string(),
                stage,
            })
        };

        let stem = ConvGeometry::cube(3, spec.stem_width, STEM_KERNEL).with_stride([1, 2, 2]);
        push(
            "conv1",
            Stage::Stem {
                conv: b.conv("conv1.conv", stem)?,
                bn: b.bn("conv1.bn", spec.stem_width),
            },
        );
        push("pool1", Stage::MaxPool(PoolGeometry::new([3; 3], [2; 3], [1; 3])));

        let dense = spec.variant == BlockVariant::DenseBlockUnit;
        let mut channels = spec.stem_width;
        for s in 0..4 {
            let stage = format!("conv{}_x", s + 2);
            if dense && channels != spec.stage_widths[s] {
                return Err(Error::Config(format!(
                    "{stage} expects {} input channels, stem/transitions give {channels}",
                    spec.stage_widths[s]
                )));
            }
            let mut blocks = Vec::with_capacity(spec.stage_blocks[s]);
            for j in 0..spec.stage_blocks[s] {
                let cfg = BlockConfig {
                    variant: spec.variant,
                    in_channels: channels,
                    width: if dense {
                        spec.growth_rate
                    } else {
                        spec.stage_widths[s]
                    },
                    stride: if !dense && s > 0 && j == 0 { 2 } else { 1 },
                    shortcut: spec.shortcut,
                    cardinality: spec.cardinality,
                };
                let block = make_block_with(&cfg, &mut b, &format!("{stage}.block{}", j + 1))?;
                channels = block.out_channels;
                blocks.push(block);
            }
            push(&stage, Stage::Blocks(blocks));
            if dense && s < 3 {
                let name = format!("transition{}", s + 1);
                let t = Transition::build(&mut b, &name, channels)?;
                channels = t.conv.geometry.out_channels;
                push(&name, Stage::Transition(t));
            }
        }
        if matches!(spec.variant, BlockVariant::DenseBlockUnit | BlockVariant::PreActBottleneck) {
            push("final_norm", Stage::FinalNorm(b.bn("final_norm", channels)));
        }
        debug_assert_eq!(channels, spec.final_width());
        push("global_pool", Stage::GlobalPool);
        let (weight, bias) = classifier(&mut b, channels, spec.num_classes);
        push(
            "fc",
            Stage::Classifier {
                weight,
                bias,
                in_features: channels,
                classes: spec.num_classes,
            },
        );
        Ok(Network {
            spec: spec.clone(),
            stages,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[NamedStage] {
        &self.stages
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Training-mode forward pass. Batch statistics feed the running
    /// averages of every trainable batch-norm layer once the pass finishes.
    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (out, updates) = {
            let mut ctx = Ctx {
                store: &self.params,
                training: true,
                updates: Vec::new(),
            };
            let out = self.run(&mut ctx, tape, x)?;
            (out, ctx.updates)
        };
        self.apply_bn_updates(updates);
        Ok(out)
    }

    /// Inference-mode forward pass using running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut ctx = Ctx {
            store: &self.params,
            training: false,
            updates: Vec::new(),
        };
        self.run(&mut ctx, tape, x)
    }

    /// Class scores `(n, C, 1, 1, 1)` for a batch of clips, inference mode.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut x = input.clone();
        x.requires_grad = false;
        x.grad = None;
        let x = tape.leaf(x);
        let y = self.forward_eval(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) {
        for u in updates {
            let mut mean = self.params.tensor(u.running_mean).clone();
            let mut var = self.params.tensor(u.running_var).clone();
            update_running(
                mean.data_mut(),
                var.data_mut(),
                &u.mean,
                &u.var,
                u.count,
                DEFAULT_MOMENTUM,
            );
            self.params.replace(u.running_mean, mean);
            self.params.replace(u.running_var, var);
        }
    }

    fn run(&self, ctx: &mut Ctx<'_>, tape: &mut Tape, mut x: Var) -> Result<Var> {
        let c = tape.shape(x).c();
        if c != 3 {
            return Err(Error::Shape {
                op: "network",
                axis: "c",
                expected: 3,
                found: c,
            });
        }
        for s in &self.stages {
            x = match &s.stage {
                Stage::Stem { conv, bn } => {
                    let h = conv.forward(ctx, tape, x)?;
                    let h = bn.forward(ctx, tape, h)?;
                    tape.relu(h)
                }
                Stage::MaxPool(g) => tape.pool3d(x, PoolMode::Max, *g)?,
                Stage::Blocks(blocks) => {
                    for b in blocks {
                        x = b.forward(ctx, tape, x)?;
                    }
                    x
                }
                Stage::Transition(t) => t.forward(ctx, tape, x)?,
                Stage::FinalNorm(bn) => {
                    let h = bn.forward(ctx, tape, x)?;
                    tape.relu(h)
                }
                Stage::GlobalPool => tape.global_avg_pool(x)?,
                Stage::Classifier { weight, bias, .. } => {
                    let w = tape.param(weight.0, ctx.store.tensor(*weight));
                    let b = tape.param(bias.0, ctx.store.tensor(*bias));
                    tape.linear(x, w, b)?
                }
            };
        }
        Ok(x)
    }

    /// Per-stage output shapes by shape arithmetic alone.
    pub fn summarize_shapes(&self, input: Shape) -> Result<ShapeReport> {
        if input.c() != 3 {
            return Err(Error::Shape {
                op: "summarize_shapes",
                axis: "c",
                expected: 3,
                found: input.c(),
            });
        }
        let counts = self.count_params();
        let mut shape = input;
        let mut rows = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            shape = match &s.stage {
                Stage::Stem { conv, .. } => conv.output_shape(shape)?,
                Stage::MaxPool(g) => g.output_shape(shape)?,
                Stage::Blocks(blocks) => blocks.iter().try_fold(shape, |sh, b| b.output_shape(sh))?,
                Stage::Transition(t) => t.output_shape(shape)?,
                Stage::FinalNorm(bn) => {
                    if bn.channels != shape.c() {
                        return Err(Error::Shape {
                            op: "final_norm",
                            axis: "c",
                            expected: bn.channels,
                            found: shape.c(),
                        });
                    }
                    shape
                }
                Stage::GlobalPool => Shape::new(shape.n(), shape.c(), 1, 1, 1),
                Stage::Classifier {
                    in_features,
                    classes,
                    ..
                } => {
                    if shape.per_sample() != *in_features {
                        return Err(Error::Shape {
                            op: "fc",
                            axis: "c",
                            expected: *in_features,
                            found: shape.per_sample(),
                        });
                    }
                    Shape::matrix(shape.n(), *classes)
                }
            };
            let groups = match &s.stage {
                Stage::Blocks(blocks) => blocks
                    .iter()
                    .flat_map(|b| b.convs())
                    .map(|c| c.geometry.groups)
                    .max()
                    .unwrap_or(1),
                _ => 1,
            };
            rows.push(StageRow {
                stage: s.name.clone(),
                shape,
                groups,
                params: counts.stage(&s.name),
            });
        }
        Ok(ShapeReport { rows })
    }

    /// Learnable element counts (conv, BN affine, linear); running
    /// statistics are excluded.
    pub fn count_params(&self) -> ParamCount {
        let mut by_stage: Vec<(String, usize)> =
            self.stages.iter().map(|s| (s.name.clone(), 0)).collect();
        let mut total = 0;
        for (_, p) in self.params.iter() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let n = p.tensor.numel();
            total += n;
            let stage = p.name.split('.').next().unwrap_or("");
            if let Some(slot) = by_stage.iter_mut().find(|(s, _)| s == stage) {
                slot.1 += n;
            }
        }
        ParamCount { total, by_stage }
    }

    /// Swaps in a freshly initialised `new_classes`-way linear head; every
    /// other parameter is left untouched.
    pub fn replace_classifier(&mut self, new_classes: usize, rng: &mut Rng) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::config("classifier must have at least one class"));
        }
        let fc = self
            .stages
            .iter_mut()
            .find_map(|s| match &mut s.stage {
                Stage::Classifier {
                    weight,
                    bias,
                    in_features,
                    classes,
                } => Some((weight, bias, in_features, classes)),
                _ => None,
            })
            .expect("network has a classifier");
        let (weight, bias, in_features, classes) = fc;
        let w = he_normal(Shape::matrix(new_classes, *in_features), *in_features, rng);
        self.params.replace(*weight, w);
        self.params.replace(*bias, Tensor::zeros(Shape::new(new_classes, 1, 1, 1, 1)));
        *classes = new_classes;
        self.spec.num_classes = new_classes;
        Ok(())
    }

    /// Leaves only learnable parameters under `trainable` prefixes (e.g.
    /// `conv5_x`, `fc`) with `requires_grad` set.
    pub fn freeze_stages<S: AsRef<str>>(&mut self, trainable: &[S]) -> Result<()> {
        if trainable.is_empty() {
            return Err(Error::config("at least one trainable prefix is required"));
        }
        for prefix in trainable {
            let prefix = prefix.as_ref();
            if !self.params.iter().any(|(_, p)| under_prefix(&p.name, prefix)) {
                return Err(Error::UnknownPrefix(prefix.to_string()));
            }
        }
        for (_, p) in self.params.iter_mut() {
            p.tensor.requires_grad = p.kind == ParamKind::Weight
                && trainable.iter().any(|t| under_prefix(&p.name, t.as_ref()));
            if !p.tensor.requires_grad {
                p.tensor.grad = None;
            }
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.tensor.requires_grad = p.kind == ParamKind::Weight;
        }
    }

    /// Names of parameters currently being trained.
    pub fn trainable(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, p)| p.tensor.requires_grad)
            .map(|(_, p)| p.name.as_str())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.zero_grads();
    }

    /// Moves parameter gradients recorded on `tape` into the registry.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        self.params.accumulate(tape.param_grads())
    }

    /// Every block in stage order, with the stage it belongs to.
    pub fn blocks(&self) -> impl Iterator<Item = (&str, &Block)> {
        self.stages.iter().flat_map(|s| {
            let blocks: &[Block] = match &s.stage {
                Stage::Blocks(b) => b,
                _ => &[],
            };
            blocks.iter().map(move |b| (s.name.as_str(), b))
        })
    }
}

fn classifier(b: &mut Builder<'_>, in_features: usize, classes: usize) -> (ParamId, ParamId) {
    let w = b.init(Shape::matrix(classes, in_features), in_features);
    let weight = b.store.add("fc.weight", ParamKind::Weight, w);
    let bias = b.store.add(
        "fc.bias",
        ParamKind::Weight,
        Tensor::zeros(Shape::new(classes, 1, 1, 1, 1)),
    );
    (weight, bias)
}
