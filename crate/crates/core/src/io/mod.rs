//! Checkpoint files and run configuration.

pub mod checkpoint;
pub mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, TrainingMeta};
pub use config::RunConfig;
