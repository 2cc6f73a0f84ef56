//! The seeded overfitting run shared by the smoke and determinism checks.

use std::path::Path;

use st3d::data::mean::compute_channel_mean;
use st3d::data::synthetic::{generate, SyntheticConfig};
use st3d::data::{load_manifest, AugmentConfig, VideoRecord};
use st3d::nn::{make_network, Network, NetworkSpec};
use st3d::train::trainer::LOG_FILE;
use st3d::train::{Mode, TrainConfig, TrainOutcome, Trainer};

pub const MAX_EPOCHS: usize = 200;
pub const TARGET_TOP1: f64 = 0.95;

/// Two classes, eight videos of 16 frames.
pub fn dataset(dir: &Path) -> Vec<VideoRecord> {
    let cfg = SyntheticConfig {
        classes: 2,
        train_per_class: 4,
        seed: 7,
        ..SyntheticConfig::default()
    };
    let manifest = generate(dir, &cfg).unwrap();
    load_manifest(manifest, Some(2)).unwrap()
}

/// ResNet-18 with every width divided by eight.
pub fn spec() -> NetworkSpec {
    NetworkSpec::from_name("resnet-18", 2).unwrap().narrowed(8).unwrap()
}

pub fn augment(records: &[VideoRecord]) -> AugmentConfig {
    let mean = compute_channel_mean(records).unwrap();
    AugmentConfig {
        out_size: 56,
        channel_mean: mean.map(|m| m as f32),
        ..AugmentConfig::default()
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: MAX_EPOCHS,
        seed: 11,
        eval_train: true,
        stop_at_train_top1: Some(TARGET_TOP1),
        // 0.1 at batch 128 scaled down for batches of four.
        lr: 0.01,
        ..TrainConfig::for_mode(Mode::Scratch)
    }
}

/// Trains from scratch until the per-video training accuracy target or the
/// epoch cap. Returns the outcome, the trained network and the CSV log.
pub fn run(work: &Path) -> (TrainOutcome, Network, String) {
    let data = work.join("data");
    let out = work.join("run");
    std::fs::create_dir_all(&data).unwrap();
    let records = dataset(&data);
    let aug = augment(&records);
    let mut net = make_network(&spec(), 1).unwrap();
    let outcome = Trainer::new(&mut net, train_config(), aug)
        .unwrap()
        .with_output(&out)
        .run(&records, &[])
        .unwrap();
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    (outcome, net, log)
}
