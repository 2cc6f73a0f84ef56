//! Declarative network descriptions and the named depth table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    Basic,
    Bottleneck,
    PreActBottleneck,
    WideBottleneck,
    ResNeXtBottleneck,
    DenseBlockUnit,
}

impl BlockVariant {
    /// Output channels of a residual block relative to its width `F`.
    /// Dense units append `k` channels instead and report 1.
    pub fn expansion(self) -> usize {
        match self {
            BlockVariant::Basic | BlockVariant::DenseBlockUnit => 1,
            BlockVariant::Bottleneck | BlockVariant::PreActBottleneck => 4,
            BlockVariant::WideBottleneck | BlockVariant::ResNeXtBottleneck => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShortcutType {
    /// Identity, or strided subsampling with zero-filled extra channels.
    A,
    /// Identity, or a 1x1x1 projection convolution plus batch norm.
    B,
}

impl FromStr for ShortcutType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ShortcutType::A),
            "B" | "b" => Ok(ShortcutType::B),
            other => Err(Error::Config(format!("unknown shortcut type `{other}`"))),
        }
    }
}

/// Architecture families with named depths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    ResNet,
    PreAct,
    Wrn,
    ResNeXt,
    DenseNet,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ResNet => "resnet",
            Family::PreAct => "preact",
            Family::Wrn => "wrn",
            Family::ResNeXt => "resnext",
            Family::DenseNet => "densenet",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(Family::ResNet),
            "preact" | "pre-act" | "preact-resnet" | "pre-act-resnet" => Ok(Family::PreAct),
            "wrn" | "wide-resnet" => Ok(Family::Wrn),
            "resnext" => Ok(Family::ResNeXt),
            "densenet" => Ok(Family::DenseNet),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }
}

/// Every named configuration: (family, depth).
pub const NAMED_CONFIGS: [(Family, usize); 11] = [
    (Family::ResNet, 18),
    (Family::ResNet, 34),
    (Family::ResNet, 50),
    (Family::ResNet, 101),
    (Family::ResNet, 152),
    (Family::ResNet, 200),
    (Family::PreAct, 200),
    (Family::Wrn, 50),
    (Family::ResNeXt, 101),
    (Family::DenseNet, 121),
    (Family::DenseNet, 201),
];

pub const DEFAULT_CARDINALITY: usize = 32;
pub const DEFAULT_GROWTH_RATE: usize = 32;
pub const DEFAULT_WIDENING_FACTOR: usize = 2;
pub const DEFAULT_STEM_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: BlockVariant,
    /// `F` per stage. For DenseNet: input channels of each stage's first unit.
    pub stage_widths: [usize; 4],
    /// `N` per stage.
    pub stage_blocks: [usize; 4],
    pub cardinality: usize,
    pub growth_rate: usize,
    pub widening_factor: usize,
    pub num_classes: usize,
    pub clip_len: usize,
    pub shortcut: ShortcutType,
    /// Output channels of conv1.
    pub stem_width: usize,
}

impl NetworkSpec {
    pub fn named(family: Family, depth: usize, num_classes: usize) -> Result<Self> {
        let base = [64, 128, 256, 512];
        let blocks = match (family, depth) {
            (Family::ResNet, 18) => [2, 2, 2, 2],
            (Family::ResNet, 34) => [3, 4, 6, 3],
            (Family::ResNet, 50) | (Family::Wrn, 50) => [3, 4, 6, 3],
            (Family::ResNet, 101) => [3, 4, 23, 3],
            // As printed in the reference architecture table, which lists the
            // same block counts as the 200-layer rows.
            (Family::ResNeXt, 101) => [3, 24, 36, 3],
            (Family::ResNet, 152) => [3, 8, 36, 3],
            (Family::ResNet, 200) | (Family::PreAct, 200) => [3, 24, 36, 3],
            (Family::DenseNet, 121) => [6, 12, 24, 16],
            (Family::DenseNet, 201) => [6, 12, 48, 32],
            _ => {
                return Err(Error::Config(format!(
                    "no {family} configuration of depth {depth}"
                )))
            }
        };
        let (variant, widths, shortcut) = match family {
            Family::ResNet if depth < 50 => (BlockVariant::Basic, base, ShortcutType::A),
            Family::ResNet => (BlockVariant::Bottleneck, base, ShortcutType::B),
            Family::PreAct => (BlockVariant::PreActBottleneck, base, ShortcutType::B),
            Family::Wrn => (
                BlockVariant::WideBottleneck,
                base.map(|f| f * DEFAULT_WIDENING_FACTOR),
                ShortcutType::B,
            ),
            Family::ResNeXt => (
                BlockVariant::ResNeXtBottleneck,
                base.map(|f| f * 2),
                ShortcutType::B,
            ),
            Family::DenseNet => (
                BlockVariant::DenseBlockUnit,
                dense_stage_inputs(DEFAULT_STEM_WIDTH, blocks, DEFAULT_GROWTH_RATE),
                ShortcutType::B,
            ),
        };
        let spec = NetworkSpec {
            variant,
            stage_widths: widths,
            stage_blocks: blocks,
            cardinality: DEFAULT_CARDINALITY,
            growth_rate: DEFAULT_GROWTH_RATE,
            widening_factor: DEFAULT_WIDENING_FACTOR,
            num_classes,
            clip_len: 16,
            shortcut,
            stem_width: DEFAULT_STEM_WIDTH,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses names such as `resnet-18`, `resnext-101` or `densenet-121`.
    pub fn from_name(name: &str, num_classes: usize) -> Result<Self> {
        let (family, depth) = name
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("model name `{name}` lacks a depth")))?;
        let depth: usize = depth
            .parse()
            .map_err(|_| Error::Config(format!("bad depth in model name `{name}`")))?;
        Self::named(family.parse()?, depth, num_classes)
    }

    pub fn with_clip_len(mut self, clip_len: usize) -> Self {
        self.clip_len = clip_len;
        self
    }

    /// Divides every channel width (stem, stages, growth rate) by `divisor`.
    /// ResNeXt keeps its per-group width, so the cardinality is divided too.
    pub fn narrowed(mut self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::config("width divisor must be positive"));
        }
        let div = |v: usize, what: &str| {
            if v % divisor != 0 || v < divisor {
                Err(Error::Config(format!("{what} {v} is not divisible by {divisor}")))
            } else {
                Ok(v / divisor)
            }
        };
        self.stem_width = div(self.stem_width, "stem width")?;
        for f in self.stage_widths.iter_mut() {
            *f = div(*f, "stage width")?;
        }
        match self.variant {
            BlockVariant::DenseBlockUnit => self.growth_rate = div(self.growth_rate, "growth rate")?,
            BlockVariant::ResNeXtBottleneck => {
                self.cardinality = div(self.cardinality, "cardinality")?
            }
            _ => {}
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.clip_len == 0 || self.stem_width == 0 {
            return Err(Error::config("clip_len and stem width must be positive"));
        }
        if self.stage_widths.contains(&0) || self.stage_blocks.contains(&0) {
            return Err(Error::config("stage widths and block counts must be positive"));
        }
        match self.variant {
            BlockVariant::ResNeXtBottleneck => {
                if self.cardinality == 0 {
                    return Err(Error::config("cardinality must be positive"));
                }
                if let Some(f) = self.stage_widths.iter().find(|f| *f % self.cardinality != 0) {
                    return Err(Error::Config(format!(
                        "cardinality {} does not divide grouped width {f}",
                        self.cardinality
                    )));
                }
            }
            BlockVariant::DenseBlockUnit => {
                if self.growth_rate == 0 {
                    return Err(Error::config("growth rate must be positive"));
                }
                let expect = dense_stage_inputs(self.stem_width, self.stage_blocks, self.growth_rate);
                if expect != self.stage_widths {
                    return Err(Error::Config(format!(
                        "dense stage widths {:?} disagree with channel bookkeeping {:?}",
                        self.stage_widths, expect
                    )));
                }
            }
            _ => {}
        }
        if self.shortcut == ShortcutType::A && self.variant != BlockVariant::Basic {
            return Err(Error::Config(format!(
                "zero-padding shortcut (type A) is only defined for basic blocks, not {:?}",
                self.variant
            )));
        }
        Ok(())
    }

    /// Channel count entering global pooling.
    pub fn final_width(&self) -> usize {
        match self.variant {
            BlockVariant::DenseBlockUnit => {
                self.stage_widths[3] + self.stage_blocks[3] * self.growth_rate
            }
            v => self.stage_widths[3] * v.expansion(),
        }
    }

    /// Number of weighted layers in the usual ResNet counting (convs on the
    /// main path plus the classifier).
    pub fn depth(&self) -> usize {
        let per_block = match self.variant {
            BlockVariant::Basic => 2,
            BlockVariant::DenseBlockUnit => 2,
            _ => 3,
        };
        let transitions = if self.variant == BlockVariant::DenseBlockUnit { 3 } else { 0 };
        2 + per_block * self.stage_blocks.iter().sum::<usize>() + transitions
    }
}

/// Input channels of each dense stage: the stem width, then each
/// transition halves `input + N * k`.
pub fn dense_stage_inputs(stem: usize, blocks: [usize; 4], growth: usize) -> [usize; 4] {
    let mut widths = [0; 4];
    let mut c = stem;
    for s in 0..4 {
        widths[s] = c;
        c = (c + blocks[s] * growth) / 2;
    }
    widths
}
