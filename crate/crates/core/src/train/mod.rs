//! Optimisation, training loops and evaluation.

pub mod eval;
pub mod optim;
pub mod trainer;

pub use eval::{
    argmax, evaluate_clips, evaluate_videos, in_top_k, predict_videos, recognize_video, ClipScorer,
    Metrics, VideoPrediction,
};
pub use optim::{sgd_update, PlateauSchedule, Sgd};
pub use trainer::{train_epoch, Mode, TrainConfig, TrainOutcome, TrainState, Trainer};
