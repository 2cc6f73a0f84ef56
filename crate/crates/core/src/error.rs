use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis} axis (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: non-positive output size on {axis} axis (input {input}, kernel {kernel}, stride {stride}, padding {padding})")]
    EmptyOutput {
        op: &'static str,
        axis: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch norm: channel {channel} has no elements in training mode")]
    DegenerateBatch { channel: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("frame {path}: {msg}")]
    Frame { path: PathBuf, msg: String },

    #[error("unknown parameter prefix `{0}`")]
    UnknownPrefix(String),

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint does not match network: {0}")]
    SpecMismatch(String),

    #[error("{0}")]
    Data(String),

    #[error("batch {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
