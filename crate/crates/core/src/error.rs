use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logit {value} at index {index}")]
    NonFiniteLogit { index: usize, value: f64 },

    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("class index {index} out of range for {num_classes} classes")]
    LabelOutOfRange { index: usize, num_classes: usize },

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("image {height}x{width} is smaller than crop size {crop}")]
    ImageTooSmall { height: usize, width: usize, crop: usize },

    #[error("unknown augmentation op `{0}`")]
    UnknownOp(String),

    #[error("invalid augmentation policy: {0}")]
    Policy(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite loss term `{term}`: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("class `{0}` has no labeled samples")]
    EmptyClass(String),

    #[error("manifest {path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("evaluation split is empty")]
    EmptyEval,

    #[error("trace: {0}")]
    Trace(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {report}")]
    Diverged { epoch: usize, step: usize, report: String },

    #[error("run directory {0} is locked by another process (remove run.lock if stale)")]
    Locked(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Error {
        let context = context.into();
        move |source| Error::Io { context, source }
    }
}
