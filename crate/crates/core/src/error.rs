use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {format}")]
    Format { path: PathBuf, format: String },

    #[error("shape error in {operand}: {detail}")]
    Shape { operand: String, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("dimension mismatch in pair(s): {}", ids.join(", "))]
    PairMismatch { ids: Vec<String> },

    #[error("checkpoint integrity error at byte offset {offset}: {detail}")]
    Integrity { offset: usize, detail: String },

    #[error("checkpoint incompatible: {}", fields.join("; "))]
    Incompatible { fields: Vec<String> },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: usize,
        last_good: Box<crate::train::Checkpoint>,
    },
}

impl Error {
    pub(crate) fn shape(operand: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            operand: operand.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
