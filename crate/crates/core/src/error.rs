use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segmentation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration values.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file did not follow the expected on-disk format.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A checkpoint was produced for a different architecture.
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    /// Dataset manifest validation failed.
    #[error("dataset validation failed: {0}")]
    Dataset(String),

    /// Synthetic generation could not satisfy its constraints.
    #[error("synthetic generation failed: {0}")]
    Generation(String),

    /// Training diverged.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
