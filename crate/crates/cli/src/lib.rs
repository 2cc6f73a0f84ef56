//! Commands behind the `st3d` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use st3d::data::frames::count_frames;
use st3d::data::manifest::filter_split;
use st3d::data::{compute_channel_mean, load_manifest, write_mean_file, AugmentConfig, Split, VideoRecord};
use st3d::io::{load_checkpoint, RunConfig};
use st3d::nn::{make_network, Network, NetworkSpec};
use st3d::train::trainer::LAST_CHECKPOINT;
use st3d::train::{evaluate_videos, recognize_video, Metrics, Trainer};
use st3d::{Rng, Shape};

/// Prints the per-stage shape and parameter table for the configured model.
pub fn inspect(config: &Path, json: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.network_spec()?;
    let side = cfg.augment.out_size.unwrap_or(112);
    let net = Network::skeleton(&spec)?;
    let report = net.summarize_shapes(Shape::new(1, 3, spec.clip_len, side, side))?;
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report.to_json())?)?;
    } else {
        writeln!(out, "{} ({} classes, {} frames of {side}x{side})", cfg.model.name, spec.num_classes, spec.clip_len)?;
        write!(out, "{}", report.to_table())?;
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: &'a Path,
    pub checkpoint: Option<&'a Path>,
    pub seed: Option<u64>,
    pub out: Option<&'a Path>,
}

/// Trains from scratch, from an initial checkpoint, or resumes a run whose
/// output directory already holds `last.st3d`.
pub fn train(args: TrainArgs<'_>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(args.config)?;
    let spec = cfg.network_spec()?;
    let tcfg = cfg.train_config(args.seed);
    let out_dir = args
        .out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")?;
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let records = manifest_records(&cfg, spec.num_classes)?;
    let train = filter_split(&records, Split::Train);
    let val = filter_split(&records, Split::Val);
    if train.is_empty() {
        bail!("manifest has no training videos");
    }
    let aug = augment_with_mean(&cfg, &train)?;

    let last = out_dir.join(LAST_CHECKPOINT);
    let init = args.checkpoint.map(Path::to_path_buf).or_else(|| cfg.train.init_checkpoint.clone());
    let (mut net, state) = if last.exists() {
        let ckpt = load_checkpoint(&last)?;
        if ckpt.spec != spec {
            bail!("{} was written for a different model", last.display());
        }
        let state = ckpt.train_state().context("checkpoint carries no training state")?;
        info!("resuming from {} after epoch {}", last.display(), ckpt.epoch);
        (ckpt.to_network()?, Some(state))
    } else if let Some(path) = init {
        (initial_network(&path, &spec, tcfg.seed)?, None)
    } else {
        (make_network(&spec, tcfg.seed)?, None)
    };

    let mut trainer = match state {
        Some(state) => Trainer::resume(&mut net, tcfg, aug, state)?,
        None => Trainer::new(&mut net, tcfg, aug)?,
    }
    .with_output(&out_dir);
    let outcome = trainer
        .run(&train, &val)
        .with_context(|| format!("training stopped; last good checkpoint is in {}", out_dir.display()))?;
    writeln!(out, "epochs run: {}", outcome.epochs_run)?;
    if let Some(s) = outcome.last_train {
        writeln!(out, "train loss {:.4}, clip accuracy {:.4}", s.loss, s.clip_acc)?;
    }
    if let Some(m) = outcome.train_metrics {
        print_metrics(out, "train", &m)?;
    }
    if let Some(m) = outcome.val_metrics {
        print_metrics(out, "val", &m)?;
    }
    if outcome.stopped_early {
        writeln!(out, "stopped early: training accuracy target reached")?;
    }
    Ok(())
}

/// Loads a starting checkpoint, swapping the classifier when the class
/// count differs (e.g. 400 -> 101 for fine-tuning).
fn initial_network(path: &Path, spec: &NetworkSpec, seed: u64) -> Result<Network> {
    let ckpt = load_checkpoint(path)?;
    let mut expected = spec.clone();
    expected.num_classes = ckpt.spec.num_classes;
    if ckpt.spec != expected {
        bail!("{} holds a different architecture than the config", path.display());
    }
    let mut net = ckpt.to_network()?;
    if net.num_classes() != spec.num_classes {
        info!("replacing the {}-way classifier with a {}-way one", net.num_classes(), spec.num_classes);
        net.replace_classifier(spec.num_classes, &mut Rng::fork(seed, "classifier"))?;
    }
    Ok(net)
}

pub struct EvalArgs<'a> {
    pub config: &'a Path,
    pub checkpoint: &'a Path,
    pub split: Split,
    pub out: Option<&'a Path>,
}

pub fn eval(args: EvalArgs<'_>, out: &mut dyn Write) -> Result<Metrics> {
    let cfg = RunConfig::load(args.config)?;
    let spec = cfg.network_spec()?;
    let mut net = Network::skeleton(&spec)?;
    load_checkpoint(args.checkpoint)?.apply_to(&mut net)?;
    let records = filter_split(&manifest_records(&cfg, spec.num_classes)?, args.split);
    if records.is_empty() {
        bail!("manifest has no {} videos", args.split);
    }
    let aug = cfg.augment_config()?;
    let m = evaluate_videos(&net, &records, &aug)?;
    print_metrics(out, &args.split.to_string(), &m)?;
    if let Some(dir) = args.out {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("eval.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["split", "videos", "clips", "clip_acc", "clip_loss", "top1", "top5", "average"])?;
        w.write_record([
            args.split.to_string(),
            m.videos.to_string(),
            m.clips.to_string(),
            m.clip_acc.to_string(),
            m.clip_loss.to_string(),
            m.top1.to_string(),
            m.top5.to_string(),
            m.average.to_string(),
        ])?;
        w.flush()?;
    }
    Ok(m)
}

pub struct PredictArgs<'a> {
    pub checkpoint: &'a Path,
    pub frames: &'a Path,
    pub config: Option<&'a Path>,
}

/// Scores every window of one video and prints the five best classes as
/// `rank label_index score`.
pub fn predict(args: PredictArgs<'_>, out: &mut dyn Write) -> Result<()> {
    let net = load_checkpoint(args.checkpoint)?.to_network()?;
    let aug = match args.config {
        Some(path) => RunConfig::load(path)?.augment_config()?,
        None => {
            warn!("no config given: using default crops and a zero channel mean");
            AugmentConfig {
                clip_len: net.spec().clip_len,
                ..AugmentConfig::default()
            }
        }
    };
    if aug.clip_len != net.spec().clip_len {
        bail!("config clip length {} differs from the checkpoint's {}", aug.clip_len, net.spec().clip_len);
    }
    let n_frames = count_frames(args.frames)?;
    if n_frames == 0 {
        bail!("no frame_NNNNNN.ppm files in {}", args.frames.display());
    }
    let rec = VideoRecord {
        id: args.frames.display().to_string(),
        frame_dir: args.frames.to_path_buf(),
        n_frames,
        label: 0,
        split: Split::Test,
    };
    let pred = recognize_video(&net, &rec, &aug)?;
    let mut ranked: Vec<(usize, f32)> = pred.scores.iter().copied().enumerate().collect();
    // Stable sort keeps the lower class index first among equal scores.
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (rank, (label, score)) in ranked.iter().take(5).enumerate() {
        writeln!(out, "{} {} {:.6}", rank + 1, label, score)?;
    }
    Ok(())
}

pub struct MeanArgs<'a> {
    pub config: Option<&'a Path>,
    pub manifest: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

/// Mean R, G, B over the training split, written as a three-line file.
pub fn compute_mean(args: MeanArgs<'_>, out: &mut dyn Write) -> Result<PathBuf> {
    let cfg = args.config.map(RunConfig::load).transpose()?;
    let manifest = args
        .manifest
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().and_then(|c| c.data.manifest.clone()))
        .context("no manifest: pass --manifest or set data.manifest")?;
    let target = args
        .out
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().and_then(|c| c.data.mean_file.clone()))
        .context("no output file: pass --out or set data.mean_file")?;
    let records = load_manifest(&manifest, None)?;
    let train = filter_split(&records, Split::Train);
    let source = if train.is_empty() { records } else { train };
    if source.is_empty() {
        bail!("{} lists no videos", manifest.display());
    }
    let mean = compute_channel_mean(&source)?;
    write_mean_file(&target, mean)?;
    writeln!(out, "{} {} {} -> {}", mean[0], mean[1], mean[2], target.display())?;
    Ok(target)
}

fn manifest_records(cfg: &RunConfig, classes: usize) -> Result<Vec<VideoRecord>> {
    let path = cfg.data.manifest.as_ref().context("config has no data.manifest")?;
    Ok(load_manifest(path, Some(classes))?)
}

/// The configured augmentation. Without an explicit mean or an existing mean
/// file, the mean is computed from the training videos and, if a mean file
/// is configured, saved there.
fn augment_with_mean(cfg: &RunConfig, train: &[VideoRecord]) -> Result<AugmentConfig> {
    let mut aug = cfg.augment_config()?;
    let have_file = cfg.data.mean_file.as_ref().is_some_and(|p| p.exists());
    if !have_file && cfg.augment.channel_mean.is_none() {
        let m = compute_channel_mean(train)?;
        info!("channel mean from training videos: {m:?}");
        if let Some(p) = &cfg.data.mean_file {
            write_mean_file(p, m)?;
        }
        aug.channel_mean = m.map(|v| v as f32);
    }
    Ok(aug)
}

fn print_metrics(out: &mut dyn Write, what: &str, m: &Metrics) -> Result<()> {
    writeln!(
        out,
        "{what}: videos {} clips {} clip_acc {:.4} clip_loss {:.4} top1 {:.4} top5 {:.4} average {:.4}",
        m.videos, m.clips, m.clip_acc, m.clip_loss, m.top1, m.top5, m.average
    )?;
    Ok(())
}
