//! Residual and dense building blocks.

use rand_distr::{Distribution, StandardNormal};

use super::params::{ParamId, ParamKind, ParamStore};
use super::spec::{BlockVariant, ShortcutType};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::norm::DEFAULT_EPS;
use crate::tensor::tape::BnStats;
use crate::tensor::{ConvGeometry, PoolGeometry, PoolMode, Shape, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub geometry: ConvGeometry,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub(crate) struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

pub(crate) struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub training: bool,
    pub updates: Vec<BnUpdate>,
}

impl ConvLayer {
    pub(crate) fn forward(&self, ctx: &Ctx<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight.0, ctx.store.tensor(self.weight));
        tape.conv3d(x, w, &self.geometry)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.geometry.output_shape(input)
    }
}

impl BnLayer {
    /// Batch statistics are used only while training with a trainable
    /// `gamma`; frozen layers normalize with their running statistics.
    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let store = ctx.store;
        let gamma = store.tensor(self.gamma);
        let g = tape.param(self.gamma.0, gamma);
        let b = tape.param(self.beta.0, store.tensor(self.beta));
        if ctx.training && gamma.requires_grad {
            let count = {
                let s = tape.shape(x);
                s.n() * s.plane()
            };
            let (y, stats) = tape.batch_norm(x, g, b, BnStats::Batch, DEFAULT_EPS)?;
            let (mean, var) = stats.expect("batch statistics");
            ctx.updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
                count,
            });
            Ok(y)
        } else {
            let stats = BnStats::Running {
                mean: store.tensor(self.running_mean).data(),
                var: store.tensor(self.running_var).data(),
            };
            Ok(tape.batch_norm(x, g, b, stats, DEFAULT_EPS)?.0)
        }
    }
}

/// Creates layers and their parameters with He fan-in normal weights, or
/// all-zero weights when there is no generator (shape-only skeletons).
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Option<&'a mut Rng>,
}

impl Builder<'_> {
    pub fn conv(&mut self, name: &str, geometry: ConvGeometry) -> Result<ConvLayer> {
        geometry.validate()?;
        let shape = geometry.weight_shape();
        let fan_in = shape.per_sample();
        let weight = self.init(shape, fan_in);
        let weight = self.store.add(format!("{name}.weight"), ParamKind::Weight, weight);
        Ok(ConvLayer { weight, geometry })
    }

    pub fn init(&mut self, shape: Shape, fan_in: usize) -> Tensor {
        match self.rng.as_deref_mut() {
            Some(rng) => he_normal(shape, fan_in, rng),
            None => Tensor::zeros(shape),
        }
    }

    pub fn bn(&mut self, name: &str, channels: usize) -> BnLayer {
        let vec_shape = Shape::new(channels, 1, 1, 1, 1);
        let mut add = |suffix: &str, kind, value| {
            self.store
                .add(format!("{name}.{suffix}"), kind, Tensor::full(vec_shape, value))
        };
        BnLayer {
            gamma: add("gamma", ParamKind::Weight, 1.0),
            beta: add("beta", ParamKind::Weight, 0.0),
            running_mean: add("running_mean", ParamKind::Buffer, 0.0),
            running_var: add("running_var", ParamKind::Buffer, 1.0),
            channels,
        }
    }
}

pub(crate) fn he_normal(shape: Shape, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..shape.numel())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .collect();
    Tensor::from_vec(shape, data).expect("sized by shape")
}

#[derive(Clone, Debug)]
pub enum Shortcut {
    Identity,
    /// Strided subsampling plus zero-filled channels; no parameters.
    ZeroPad { out_channels: usize, stride: [usize; 3] },
    Projection { conv: ConvLayer, bn: BnLayer },
}

impl Shortcut {
    fn forward(&self, ctx: &mut Ctx<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Shortcut::Identity => Ok(x),
            Shortcut::ZeroPad {
                out_channels,
                stride,
            } => tape.shortcut_a(x, *out_channels, *stride),
            Shortcut::Projection { conv, bn } => {
                let h = conv.forward(ctx, tape, x)?;
                bn.forward(ctx, tape, h)
            }
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Shortcut::Identity => Ok(input),
            Shortcut::ZeroPad {
                out_channels,
                stride,
            } => {
                let [t, h, w] = input.volume();
                Ok(Shape::new(
                    input.n(),
                    *out_channels,
                    (t.max(1) - 1) / stride[0] + 1,
                    (h.max(1) - 1) / stride[1] + 1,
                    (w.max(1) - 1) / stride[2] + 1,
                ))
            }
            Shortcut::Projection { conv, .. } => conv.output_shape(input),
        }
    }
}

#[derive(Clone, Debug)]
pub enum BlockKind {
    /// conv3-BN-ReLU-conv3-BN, + shortcut, ReLU.
    Basic {
        conv1: ConvLayer,
        bn1: BnLayer,
        conv2: ConvLayer,
        bn2: BnLayer,
        shortcut: Shortcut,
    },
    /// conv1-BN-ReLU-conv3-BN-ReLU-conv1-BN, + shortcut, ReLU. Covers the
    /// plain, wide and grouped (ResNeXt) bottlenecks.
    Bottleneck {
        conv1: ConvLayer,
        bn1: BnLayer,
        conv2: ConvLayer,
        bn2: BnLayer,
        conv3: ConvLayer,
        bn3: BnLayer,
        shortcut: Shortcut,
    },
    /// BN-ReLU-conv1-BN-ReLU-conv3-BN-ReLU-conv1, + shortcut of the raw input.
    PreAct {
        bn1: BnLayer,
        conv1: ConvLayer,
        bn2: BnLayer,
        conv2: ConvLayer,
        bn3: BnLayer,
        conv3: ConvLayer,
        shortcut: Shortcut,
    },
    /// BN-ReLU-conv1(4k)-BN-ReLU-conv3(k), concatenated after the input.
    Dense {
        bn1: BnLayer,
        conv1: ConvLayer,
        bn2: BnLayer,
        conv2: ConvLayer,
    },
}

#[derive(Clone, Debug)]
pub struct Block {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kind: BlockKind,
}

/// Inputs to [`make_block`]. For dense units `width` is the growth rate.
#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub variant: BlockVariant,
    pub in_channels: usize,
    pub width: usize,
    pub stride: usize,
    pub shortcut: ShortcutType,
    pub cardinality: usize,
}

pub fn make_block(cfg: &BlockConfig, store: &mut ParamStore, prefix: &str, rng: &mut Rng) -> Result<Block> {
    let mut b = Builder {
        store,
        rng: Some(rng),
    };
    make_block_with(cfg, &mut b, prefix)
}

pub(crate) fn make_block_with(cfg: &BlockConfig, b: &mut Builder<'_>, prefix: &str) -> Result<Block> {
    if cfg.stride != 1 && cfg.stride != 2 {
        return Err(Error::Config(format!("block stride must be 1 or 2, got {}", cfg.stride)));
    }
    if cfg.in_channels == 0 || cfg.width == 0 {
        return Err(Error::config("block channel counts must be positive"));
    }
    if cfg.shortcut == ShortcutType::A
        && !matches!(cfg.variant, BlockVariant::Basic | BlockVariant::DenseBlockUnit)
    {
        return Err(Error::Config(format!(
            "{:?} blocks use projection shortcuts; type A is not available",
            cfg.variant
        )));
    }
    let s = [cfg.stride; 3];
    let name = |layer: &str| format!("{prefix}.{layer}");
    let f = cfg.width;
    let in_c = cfg.in_channels;

    if cfg.variant == BlockVariant::DenseBlockUnit {
        if cfg.stride != 1 {
            return Err(Error::config("dense units do not down-sample"));
        }
        let inner = 4 * f;
        let kind = BlockKind::Dense {
            bn1: b.bn(&name("bn1"), in_c),
            conv1: b.conv(&name("conv1"), ConvGeometry::cube(in_c, inner, 1))?,
            bn2: b.bn(&name("bn2"), inner),
            conv2: b.conv(&name("conv2"), ConvGeometry::cube(inner, f, 3))?,
        };
        return Ok(Block {
            in_channels: in_c,
            out_channels: in_c + f,
            stride: 1,
            kind,
        });
    }

    let out_c = f * cfg.variant.expansion();
    let shortcut = |b: &mut Builder<'_>| -> Result<Shortcut> {
        if cfg.stride == 1 && in_c == out_c {
            return Ok(Shortcut::Identity);
        }
        match cfg.shortcut {
            ShortcutType::A => {
                if out_c < in_c {
                    return Err(Error::Config(format!(
                        "zero-padding shortcut cannot reduce {in_c} channels to {out_c}"
                    )));
                }
                Ok(Shortcut::ZeroPad {
                    out_channels: out_c,
                    stride: s,
                })
            }
            ShortcutType::B => Ok(Shortcut::Projection {
                conv: b.conv(
                    &name("shortcut.conv"),
                    ConvGeometry::cube(in_c, out_c, 1).with_stride(s),
                )?,
                bn: b.bn(&name("shortcut.bn"), out_c),
            }),
        }
    };

    let kind = match cfg.variant {
        BlockVariant::Basic => BlockKind::Basic {
            conv1: b.conv(&name("conv1"), ConvGeometry::cube(in_c, f, 3).with_stride(s))?,
            bn1: b.bn(&name("bn1"), f),
            conv2: b.conv(&name("conv2"), ConvGeometry::cube(f, f, 3))?,
            bn2: b.bn(&name("bn2"), f),
            shortcut: shortcut(b)?,
        },
        BlockVariant::Bottleneck | BlockVariant::WideBottleneck | BlockVariant::ResNeXtBottleneck => {
            let groups = if cfg.variant == BlockVariant::ResNeXtBottleneck {
                cfg.cardinality
            } else {
                1
            };
            BlockKind::Bottleneck {
                conv1: b.conv(&name("conv1"), ConvGeometry::cube(in_c, f, 1))?,
                bn1: b.bn(&name("bn1"), f),
                conv2: b.conv(
                    &name("conv2"),
                    ConvGeometry::cube(f, f, 3).with_stride(s).with_groups(groups),
                )?,
                bn2: b.bn(&name("bn2"), f),
                conv3: b.conv(&name("conv3"), ConvGeometry::cube(f, out_c, 1))?,
                bn3: b.bn(&name("bn3"), out_c),
                shortcut: shortcut(b)?,
            }
        }
        BlockVariant::PreActBottleneck => BlockKind::PreAct {
            bn1: b.bn(&name("bn1"), in_c),
            conv1: b.conv(&name("conv1"), ConvGeometry::cube(in_c, f, 1))?,
            bn2: b.bn(&name("bn2"), f),
            conv2: b.conv(&name("conv2"), ConvGeometry::cube(f, f, 3).with_stride(s))?,
            bn3: b.bn(&name("bn3"), f),
            conv3: b.conv(&name("conv3"), ConvGeometry::cube(f, out_c, 1))?,
            shortcut: shortcut(b)?,
        },
        BlockVariant::DenseBlockUnit => unreachable!(),
    };
    Ok(Block {
        in_channels: in_c,
        out_channels: out_c,
        stride: cfg.stride,
        kind,
    })
}

impl Block {
    pub fn shortcut(&self) -> Option<&Shortcut> {
        match &self.kind {
            BlockKind::Basic { shortcut, .. }
            | BlockKind::Bottleneck { shortcut, .. }
            | BlockKind::PreAct { shortcut, .. } => Some(shortcut),
            BlockKind::Dense { .. } => None,
        }
    }

    /// Every convolution in the block, main path first.
    pub fn convs(&self) -> Vec<&ConvLayer> {
        let mut v = match &self.kind {
            BlockKind::Basic { conv1, conv2, .. } => vec![conv1, conv2],
            BlockKind::Bottleneck {
                conv1, conv2, conv3, ..
            }
            | BlockKind::PreAct {
                conv1, conv2, conv3, ..
            } => vec![conv1, conv2, conv3],
            BlockKind::Dense { conv1, conv2, .. } => vec![conv1, conv2],
        };
        if let Some(Shortcut::Projection { conv, .. }) = self.shortcut() {
            v.push(conv);
        }
        v
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        match &self.kind {
            BlockKind::Basic {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            } => {
                let h = conv1.forward(ctx, tape, x)?;
                let h = bn1.forward(ctx, tape, h)?;
                let h = tape.relu(h);
                let h = conv2.forward(ctx, tape, h)?;
                let h = bn2.forward(ctx, tape, h)?;
                let r = shortcut.forward(ctx, tape, x)?;
                let sum = tape.add(h, r)?;
                Ok(tape.relu(sum))
            }
            BlockKind::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
                shortcut,
            } => {
                let h = conv1.forward(ctx, tape, x)?;
                let h = bn1.forward(ctx, tape, h)?;
                let h = tape.relu(h);
                let h = conv2.forward(ctx, tape, h)?;
                let h = bn2.forward(ctx, tape, h)?;
                let h = tape.relu(h);
                let h = conv3.forward(ctx, tape, h)?;
                let h = bn3.forward(ctx, tape, h)?;
                let r = shortcut.forward(ctx, tape, x)?;
                let sum = tape.add(h, r)?;
                Ok(tape.relu(sum))
            }
            BlockKind::PreAct {
                bn1,
                conv1,
                bn2,
                conv2,
                bn3,
                conv3,
                shortcut,
            } => {
                let h = bn1.forward(ctx, tape, x)?;
                let h = tape.relu(h);
                let h = conv1.forward(ctx, tape, h)?;
                let h = bn2.forward(ctx, tape, h)?;
                let h = tape.relu(h);
                let h = conv2.forward(ctx, tape, h)?;
                let h = bn3.forward(ctx, tape, h)?;
                let h = tape.relu(h);
                let h = conv3.forward(ctx, tape, h)?;
                let r = shortcut.forward(ctx, tape, x)?;
                tape.add(h, r)
            }
            BlockKind::Dense {
                bn1,
                conv1,
                bn2,
                conv2,
            } => {
                let h = bn1.forward(ctx, tape, x)?;
                let h = tape.relu(h);
                let h = conv1.forward(ctx, tape, h)?;
                let h = bn2.forward(ctx, tape, h)?;
                let h = tape.relu(h);
                let h = conv2.forward(ctx, tape, h)?;
                tape.concat_channels(x, h)
            }
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let chain = |convs: &[&ConvLayer]| -> Result<Shape> {
            convs.iter().try_fold(input, |s, c| c.output_shape(s))
        };
        let join = |main: Shape, shortcut: &Shortcut| -> Result<Shape> {
            let side = shortcut.output_shape(input)?;
            if side != main {
                return Err(Error::Config(format!(
                    "residual branches disagree: {main} vs {side}"
                )));
            }
            Ok(main)
        };
        match &self.kind {
            BlockKind::Basic {
                conv1,
                conv2,
                shortcut,
                ..
            } => join(chain(&[conv1, conv2])?, shortcut),
            BlockKind::Bottleneck {
                conv1,
                conv2,
                conv3,
                shortcut,
                ..
            }
            | BlockKind::PreAct {
                conv1,
                conv2,
                conv3,
                shortcut,
                ..
            } => join(chain(&[conv1, conv2, conv3])?, shortcut),
            BlockKind::Dense { conv1, conv2, .. } => {
                let h = chain(&[conv1, conv2])?;
                Ok(input.with_channels(input.c() + h.c()))
            }
        }
    }
}

/// DenseNet transition: BN-ReLU, 3x3x3 conv halving channels, 2x2x2
/// average pool with stride 2.
#[derive(Clone, Debug)]
pub struct Transition {
    pub bn: BnLayer,
    pub conv: ConvLayer,
    pub pool: PoolGeometry,
}

impl Transition {
    pub(crate) fn build(b: &mut Builder<'_>, prefix: &str, in_channels: usize) -> Result<Self> {
        let out = in_channels / 2;
        Ok(Transition {
            bn: b.bn(&format!("{prefix}.bn"), in_channels),
            conv: b.conv(&format!("{prefix}.conv"), ConvGeometry::cube(in_channels, out, 3))?,
            pool: PoolGeometry::new([2; 3], [2; 3], [0; 3]),
        })
    }

    pub(crate) fn forward(&self, ctx: &mut Ctx<'_>, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.bn.forward(ctx, tape, x)?;
        let h = tape.relu(h);
        let h = self.conv.forward(ctx, tape, h)?;
        tape.pool3d(h, PoolMode::Avg, self.pool)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.pool.output_shape(self.conv.output_shape(input)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(cfg: BlockConfig) -> (Block, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let b = make_block(&cfg, &mut store, "blk", &mut rng).unwrap();
        (b, store)
    }

    fn cfg(variant: BlockVariant, in_channels: usize, width: usize, stride: usize, shortcut: ShortcutType) -> BlockConfig {
        BlockConfig {
            variant,
            in_channels,
            width,
            stride,
            shortcut,
            cardinality: 32,
        }
    }

    #[test]
    fn basic_identity_block() {
        let (b, _) = build(cfg(BlockVariant::Basic, 64, 64, 1, ShortcutType::A));
        assert!(matches!(b.shortcut(), Some(Shortcut::Identity)));
        assert_eq!(b.out_channels, 64);
        let s = Shape::new(1, 64, 4, 7, 7);
        assert_eq!(b.output_shape(s).unwrap(), s);
    }

    #[test]
    fn bottleneck_projection_block() {
        let (b, store) = build(cfg(BlockVariant::Bottleneck, 256, 128, 2, ShortcutType::B));
        match b.shortcut() {
            Some(Shortcut::Projection { conv, bn }) => {
                assert_eq!(conv.geometry.kernel, [1, 1, 1]);
                assert_eq!(conv.geometry.stride, [2, 2, 2]);
                assert_eq!(conv.geometry.out_channels, 512);
                assert_eq!(bn.channels, 512);
            }
            other => panic!("expected projection, got {other:?}"),
        }
        assert!(store.by_name("blk.shortcut.conv.weight").is_some());
        assert_eq!(b.out_channels, 512);
    }

    #[test]
    fn dense_unit_appends_growth() {
        let (b, _) = build(cfg(BlockVariant::DenseBlockUnit, 64, 32, 1, ShortcutType::B));
        assert_eq!(b.out_channels, 96);
        assert_eq!(b.output_shape(Shape::new(1, 64, 2, 3, 3)).unwrap().c(), 96);
    }

    #[test]
    fn resnext_groups_middle_conv() {
        let (b, _) = build(cfg(BlockVariant::ResNeXtBottleneck, 64, 128, 1, ShortcutType::B));
        assert_eq!(b.convs()[1].geometry.groups, 32);
        assert_eq!(b.out_channels, 256);
    }

    #[test]
    fn type_a_rejected_for_bottleneck() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let c = cfg(BlockVariant::Bottleneck, 64, 64, 1, ShortcutType::A);
        assert!(make_block(&c, &mut store, "x", &mut rng).is_err());
    }

    #[test]
    fn zero_pad_shortcut_adds_no_params() {
        let (b, store) = build(cfg(BlockVariant::Basic, 64, 128, 2, ShortcutType::A));
        assert!(matches!(b.shortcut(), Some(Shortcut::ZeroPad { out_channels: 128, .. })));
        let n: usize = store.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(_, p)| p.tensor.numel()).sum();
        assert_eq!(n, 64 * 128 * 27 + 128 * 128 * 27 + 4 * 128);
    }

    #[test]
    fn bad_stride_rejected() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let c = cfg(BlockVariant::Basic, 8, 8, 3, ShortcutType::A);
        assert!(make_block(&c, &mut store, "x", &mut rng).is_err());
    }
}
