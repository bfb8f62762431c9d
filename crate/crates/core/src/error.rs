use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("state error: {0}")]
    State(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("training diverged at step {step}: total loss is {value}")]
    Divergence { step: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
