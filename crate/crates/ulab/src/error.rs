use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum UlabError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("unknown token: {token:?}")]
    UnknownToken { token: String },

    #[error("context length {len} exceeds maximum {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("degenerate vocabulary of size {size}; need at least {min}")]
    DegenerateVocab { size: usize, min: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite loss at batch index {batch_index}")]
    NonFiniteLoss { batch_index: usize },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("bad checkpoint {path:?}: {reason}")]
    CheckpointFormat { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed run record: {0}")]
    Record(String),
}

pub type Result<T> = std::result::Result<T, UlabError>;
