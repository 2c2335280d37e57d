use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration value violates a constraint.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data failed validation (non-binary masks, inconsistent annotator counts, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// An index (timestep, consensus level, annotator) is out of its valid range.
    #[error("{what} index {index} out of range 1..={max}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    /// A numeric failure such as a non-finite loss.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed checkpoint file.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
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
