//! JSON run configuration.
//!
//! ```json
//! {
//!   "model": { "name": "resnet-18", "num_classes": 2, "clip_len": 16, "width_divisor": 8 },
//!   "data": { "manifest": "data/manifest.tsv", "mean_file": "data/mean.txt" },
//!   "augment": { "out_size": 56 },
//!   "train": { "mode": "scratch", "epochs": 20, "batch_size": 4 },
//!   "output_dir": "runs/smoke"
//! }
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory
//! holding the configuration file. Omitted training values take the
//! defaults of the selected mode.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::mean::read_mean_file;
use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, ShortcutType};
use crate::train::trainer::{Mode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `resnet-18`, `preact-200`, `wrn-50`, `resnext-101`, `densenet-121`, ...
    pub name: String,
    pub num_classes: usize,
    #[serde(default = "default_clip_len")]
    pub clip_len: usize,
    #[serde(default)]
    pub shortcut: Option<ShortcutType>,
    /// Divide all channel widths by this factor (for small experiments).
    #[serde(default)]
    pub width_divisor: Option<usize>,
}

fn default_clip_len() -> usize {
    16
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub mean_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub scales: Option<Vec<f64>>,
    pub out_size: Option<usize>,
    pub flip_prob: Option<f64>,
    pub channel_mean: Option<[f32; 3]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Option<Mode>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub trainable: Option<Vec<String>>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub eval_train: Option<bool>,
    pub stop_at_train_top1: Option<f64>,
    /// Checkpoint to start from; its classifier is replaced when the class
    /// count differs.
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses, resolves relative paths and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::from_json(&text, base)
    }

    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.data.manifest);
        fix(&mut self.data.mean_file);
        fix(&mut self.train.init_checkpoint);
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.network_spec()?;
        let t = &self.train;
        if let Some(lr) = t.lr {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("train.lr must be > 0, got {lr}")));
            }
        }
        if let Some(wd) = t.weight_decay {
            if !(wd >= 0.0) {
                return Err(Error::Config(format!("train.weight_decay must be >= 0, got {wd}")));
            }
        }
        if let Some(m) = t.momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!("train.momentum must be in [0, 1), got {m}")));
            }
        }
        if t.batch_size == Some(0) {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if t.patience == Some(0) {
            return Err(Error::config("train.patience must be at least 1"));
        }
        if let Some(p) = self.augment.flip_prob {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("augment.flip_prob must be in (0, 1), got {p}")));
            }
        }
        if let Some(goal) = t.stop_at_train_top1 {
            if !(0.0..=1.0).contains(&goal) {
                return Err(Error::Config(format!(
                    "train.stop_at_train_top1 must be in [0, 1], got {goal}"
                )));
            }
        }
        for (field, path) in [
            ("data.manifest", &self.data.manifest),
            ("train.init_checkpoint", &self.train.init_checkpoint),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!("{field}: {} does not exist", p.display())));
                }
            }
        }
        self.augment_config()?.validate()
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let m = &self.model;
        let mut spec = NetworkSpec::from_name(&m.name, m.num_classes)?.with_clip_len(m.clip_len);
        if let Some(s) = m.shortcut {
            spec.shortcut = s;
        }
        if let Some(d) = m.width_divisor {
            spec = spec.narrowed(d)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Augmentation settings; the channel mean comes from `data.mean_file`
    /// once that file exists (`compute-mean` writes it).
    pub fn augment_config(&self) -> Result<AugmentConfig> {
        let mut a = AugmentConfig {
            clip_len: self.model.clip_len,
            ..AugmentConfig::default()
        };
        let s = &self.augment;
        if let Some(v) = &s.scales {
            a.scales = v.clone();
        }
        if let Some(v) = s.out_size {
            a.out_size = v;
        }
        if let Some(v) = s.flip_prob {
            a.flip_prob = v;
        }
        if let Some(v) = s.channel_mean {
            a.channel_mean = v;
        }
        if let Some(p) = &self.data.mean_file {
            if p.exists() {
                a.channel_mean = read_mean_file(p)?;
            }
        }
        Ok(a)
    }

    pub fn mode(&self) -> Mode {
        self.train.mode.unwrap_or(Mode::Scratch)
    }

    /// Training settings: the mode's defaults overridden by the file, then
    /// by `seed` if given.
    pub fn train_config(&self, seed: Option<u64>) -> TrainConfig {
        let t = &self.train;
        let mut c = TrainConfig::for_mode(self.mode());
        c.lr = t.lr.unwrap_or(c.lr);
        c.momentum = t.momentum.unwrap_or(c.momentum);
        c.weight_decay = t.weight_decay.unwrap_or(c.weight_decay);
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.epochs = t.epochs.unwrap_or(c.epochs);
        c.seed = seed.or(t.seed).unwrap_or(c.seed);
        if let Some(tr) = &t.trainable {
            c.trainable = tr.clone();
        }
        c.patience = t.patience.unwrap_or(c.patience);
        c.min_delta = t.min_delta.unwrap_or(c.min_delta);
        c.eval_train = t.eval_train.unwrap_or(c.eval_train);
        c.stop_at_train_top1 = t.stop_at_train_top1.or(c.stop_at_train_top1);
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(json: &str) -> Result<RunConfig> {
        RunConfig::from_json(json, Path::new("."))
    }

    #[test]
    fn mode_defaults_apply() {
        let c = parse(r#"{"model": {"name": "resnet-18", "num_classes": 400}}"#).unwrap();
        let t = c.train_config(None);
        assert_eq!((t.lr, t.weight_decay, t.momentum), (0.1, 1e-3, 0.9));
        let f = parse(r#"{"model": {"name": "resnet-50", "num_classes": 101}, "train": {"mode": "finetune"}}"#)
            .unwrap()
            .train_config(Some(4));
        assert_eq!((f.lr, f.weight_decay, f.seed), (1e-3, 1e-5, 4));
    }

    #[test]
    fn rejects_bad_values_with_field_names() {
        for (json, field) in [
            (r#"{"model": {"name": "resnet-18", "num_classes": 4}, "train": {"lr": 0}}"#, "train.lr"),
            (r#"{"model": {"name": "resnet-18", "num_classes": 4}, "train": {"weight_decay": -1}}"#, "train.weight_decay"),
            (r#"{"model": {"name": "resnet-18", "num_classes": 4}, "augment": {"flip_prob": 1.0}}"#, "augment.flip_prob"),
            (r#"{"model": {"name": "resnet-18", "num_classes": 4}, "trian": {}}"#, "trian"),
            (r#"{"model": {"name": "resnet-77", "num_classes": 4}}"#, "77"),
            (r#"{"model": {"name": "resnet-18", "num_classes": 4}, "data": {"manifest": "/nonexistent/m.tsv"}}"#, "data.manifest"),
        ] {
            let e = parse(json).unwrap_err().to_string();
            assert!(e.contains(field), "{e} should mention {field}");
        }
    }
}
