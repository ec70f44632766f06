use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("question step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("dialog generation failed: {0}")]
    Generation(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("config: {0}")]
    Config(String),
    #[error("dimension mismatch for `{name}`: expected {expected}, found {found}")]
    DimMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },
    #[error("trace validation: {0}")]
    Trace(String),
    #[error("output {0} already exists (use --force to overwrite)")]
    OutputExists(PathBuf),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
