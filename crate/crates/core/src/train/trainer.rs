//! Scratch training and fine-tuning loops.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use serde::{Deserialize, Serialize};

use super::eval::{argmax, evaluate_videos, Metrics};
use super::optim::{PlateauSchedule, Sgd, DEFAULT_MIN_DELTA, DEFAULT_MOMENTUM, DEFAULT_PATIENCE};
use crate::data::augment::{sample_training_clip, AugmentConfig};
use crate::data::manifest::VideoRecord;
use crate::error::{Error, Result};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::nn::Network;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Scratch,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Parameter-name prefixes left trainable; empty trains everything.
    pub trainable: Vec<String>,
    pub patience: usize,
    pub min_delta: f64,
    /// Evaluate per-video accuracy on the training split after each epoch.
    pub eval_train: bool,
    /// Stop once per-video training top-1 reaches this value.
    pub stop_at_train_top1: Option<f64>,
}

impl TrainConfig {
    pub fn for_mode(mode: Mode) -> Self {
        let (lr, weight_decay, trainable) = match mode {
            Mode::Scratch => (0.1, 1e-3, Vec::new()),
            Mode::Finetune => (1e-3, 1e-5, vec!["conv5_x".to_string(), "fc".to_string()]),
        };
        TrainConfig {
            mode,
            lr,
            momentum: DEFAULT_MOMENTUM,
            weight_decay,
            batch_size: 8,
            epochs: 50,
            seed: 0,
            trainable,
            patience: DEFAULT_PATIENCE,
            min_delta: DEFAULT_MIN_DELTA,
            eval_train: false,
            stop_at_train_top1: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// Everything needed to continue a run after the last completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub sgd: Sgd,
    pub schedule: PlateauSchedule,
    /// Lowest monitored loss so far (validation, else training loss).
    pub best_loss: f64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            epoch: 0,
            sgd: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            schedule: PlateauSchedule::new(cfg.lr, cfg.patience, cfg.min_delta)?,
            best_loss: f64::INFINITY,
            seed: cfg.seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean per-clip cross-entropy.
    pub loss: f64,
    /// Fraction of training clips classified correctly in training mode.
    pub clip_acc: f64,
}

/// Seed for the sampling and shuffling of one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    Rng::fork(seed, &format!("epoch{epoch}")).next()
}

/// One pass over `records` in shuffled order, one random clip per video.
/// Clip sampling runs on a producer thread, at most two batches ahead.
pub fn train_epoch(
    net: &mut Network,
    records: &[VideoRecord],
    aug: &AugmentConfig,
    sgd: &mut Sgd,
    batch_size: usize,
    seed: u64,
) -> Result<EpochStats> {
    if records.is_empty() {
        return Err(Error::Data("no training videos".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    Rng::fork(seed, "shuffle").shuffle(&mut order);
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();

    let (mut loss_sum, mut correct, mut seen) = (0f64, 0usize, 0usize);
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<Result<(Tensor, Vec<usize>)>>(2);
        scope.spawn(move || {
            for batch in &batches {
                let built = batch
                    .iter()
                    .map(|&i| {
                        let rec = &records[i];
                        let mut rng = Rng::fork(seed, &rec.id);
                        sample_training_clip(rec, aug, &mut rng).map(|c| (c.tensor, c.label))
                    })
                    .collect::<Result<Vec<_>>>()
                    .and_then(|clips| {
                        let labels = clips.iter().map(|c| c.1).collect();
                        let tensors: Vec<Tensor> = clips.into_iter().map(|c| c.0).collect();
                        Ok((Tensor::stack(&tensors)?, labels))
                    });
                if tx.send(built).is_err() {
                    break;
                }
            }
        });
        for (index, msg) in rx.iter().enumerate() {
            let wrap = |e: Error| Error::Batch {
                index,
                source: Box::new(e),
            };
            let (x, labels) = msg.map_err(wrap)?;
            let (loss, hits) = train_step(net, sgd, x, &labels).map_err(wrap)?;
            loss_sum += loss * labels.len() as f64;
            correct += hits;
            seen += labels.len();
        }
        Ok(())
    })?;
    let loss = loss_sum / seen as f64;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("training loss {loss}")));
    }
    Ok(EpochStats {
        loss,
        clip_acc: correct as f64 / seen as f64,
    })
}

/// Forward, backward and one optimizer step on a batch. Returns the batch
/// loss and the number of correctly classified clips.
pub fn train_step(net: &mut Network, sgd: &mut Sgd, x: Tensor, labels: &[usize]) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let input = tape.leaf(x);
    let logits = net.forward_train(&mut tape, input)?;
    let hits = (0..labels.len())
        .filter(|&i| argmax(tape.value(logits).row(i)) == labels[i])
        .count();
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = f64::from(tape.value(loss).item()?);
    if !value.is_finite() {
        return Err(Error::Diverged(format!("batch loss {value}")));
    }
    tape.backward(loss)?;
    net.zero_grads();
    net.accumulate_grads(&tape)?;
    drop(tape);
    sgd.step(net.params_mut())?;
    net.zero_grads();
    Ok((value, hits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub clip_acc: Option<f64>,
    pub video_top1: Option<f64>,
    pub video_top5: Option<f64>,
    pub lr: f64,
}

impl LogRow {
    fn fields(&self) -> [String; 7] {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        [
            self.epoch.to_string(),
            self.phase.clone(),
            self.loss.to_string(),
            opt(self.clip_acc),
            opt(self.video_top1),
            opt(self.video_top5),
            self.lr.to_string(),
        ]
    }

    fn from_metrics(epoch: usize, phase: &str, m: &Metrics, lr: f64) -> Self {
        LogRow {
            epoch,
            phase: phase.into(),
            loss: m.clip_loss,
            clip_acc: Some(m.clip_acc),
            video_top1: Some(m.top1),
            video_top5: Some(m.top5),
            lr,
        }
    }
}

pub const LOG_HEADER: [&str; 7] = ["epoch", "phase", "loss", "clip_acc", "video_top1", "video_top5", "lr"];
pub const LOG_FILE: &str = "train_log.csv";
pub const LAST_CHECKPOINT: &str = "last.st3d";
pub const BEST_CHECKPOINT: &str = "best.st3d";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub last_train: Option<EpochStats>,
    pub train_metrics: Option<Metrics>,
    pub val_metrics: Option<Metrics>,
    pub stopped_early: bool,
    pub history: Vec<LogRow>,
}

/// Runs epochs, evaluation, the plateau schedule, logging and checkpoints.
pub struct Trainer<'a> {
    net: &'a mut Network,
    cfg: TrainConfig,
    aug: AugmentConfig,
    state: TrainState,
    out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a mut Network, cfg: TrainConfig, aug: AugmentConfig) -> Result<Self> {
        let state = TrainState::new(&cfg)?;
        Self::resume(net, cfg, aug, state)
    }

    /// Continues from `state`, typically restored from a checkpoint.
    pub fn resume(net: &'a mut Network, cfg: TrainConfig, aug: AugmentConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        aug.validate()?;
        if cfg.trainable.is_empty() {
            net.unfreeze_all();
        } else {
            net.freeze_stages(&cfg.trainable)?;
        }
        Ok(Trainer {
            net,
            cfg,
            aug,
            state,
            out_dir: None,
        })
    }

    /// Writes `train_log.csv`, `last.st3d` and `best.st3d` into `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn run(&mut self, train: &[VideoRecord], val: &[VideoRecord]) -> Result<TrainOutcome> {
        let mut log = match &self.out_dir {
            Some(dir) => Some(open_log(dir, self.state.epoch > 0)?),
            None => None,
        };
        let mut outcome = TrainOutcome {
            epochs_run: 0,
            last_train: None,
            train_metrics: None,
            val_metrics: None,
            stopped_early: false,
            history: Vec::new(),
        };
        while self.state.epoch < self.cfg.epochs {
            let epoch = self.state.epoch + 1;
            let lr = self.state.schedule.lr;
            self.state.sgd.lr = lr;
            let stats = train_epoch(
                self.net,
                train,
                &self.aug,
                &mut self.state.sgd,
                self.cfg.batch_size,
                epoch_seed(self.state.seed, epoch),
            )?;
            let mut rows = vec![LogRow {
                epoch,
                phase: "train".into(),
                loss: stats.loss,
                clip_acc: Some(stats.clip_acc),
                video_top1: None,
                video_top5: None,
                lr,
            }];
            let train_metrics = if self.cfg.eval_train || self.cfg.stop_at_train_top1.is_some() {
                let m = evaluate_videos(&*self.net, train, &self.aug)?;
                rows.push(LogRow::from_metrics(epoch, "train_eval", &m, lr));
                Some(m)
            } else {
                None
            };
            let val_metrics = if val.is_empty() {
                None
            } else {
                let m = evaluate_videos(&*self.net, val, &self.aug)?;
                rows.push(LogRow::from_metrics(epoch, "val", &m, lr));
                Some(m)
            };
            let monitored = val_metrics.map_or(stats.loss, |m| m.clip_loss);
            self.state.schedule.step(monitored)?;
            self.state.epoch = epoch;
            if let Some(w) = log.as_mut() {
                for r in &rows {
                    w.write_record(r.fields())?;
                }
                w.flush()?;
            }
            if let Some(dir) = &self.out_dir {
                let ckpt = Checkpoint::from_training(self.net, &self.state);
                save_checkpoint(dir.join(LAST_CHECKPOINT), &ckpt)?;
                if monitored < self.state.best_loss {
                    self.state.best_loss = monitored;
                    let ckpt = Checkpoint::from_training(self.net, &self.state);
                    save_checkpoint(dir.join(BEST_CHECKPOINT), &ckpt)?;
                }
            } else if monitored < self.state.best_loss {
                self.state.best_loss = monitored;
            }
            log::info!(
                "epoch {epoch}: loss {:.4} clip_acc {:.3} lr {lr}",
                stats.loss,
                stats.clip_acc
            );
            outcome.epochs_run += 1;
            outcome.last_train = Some(stats);
            outcome.train_metrics = train_metrics;
            outcome.val_metrics = val_metrics;
            outcome.history.extend(rows);
            if let (Some(goal), Some(m)) = (self.cfg.stop_at_train_top1, train_metrics) {
                if m.top1 >= goal {
                    outcome.stopped_early = true;
                    break;
                }
            }
        }
        Ok(outcome)
    }
}

fn open_log(dir: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(LOG_FILE);
    let existing = append && path.is_file();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(existing)
        .truncate(!existing)
        .open(&path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !existing {
        w.write_record(LOG_HEADER)?;
    }
    Ok(w)
}
