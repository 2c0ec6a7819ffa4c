//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, model construction, data generation and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value outside its legal domain (targets, areas, probabilities...).
    #[error("value error: {0}")]
    Value(String),

    /// Invalid configuration (strides, ratios, schedules, unknown keys...).
    #[error("config error: {0}")]
    Config(String),

    /// Filesystem or serialization failure.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Corrupt or unreadable on-disk artifact (tensor file, checkpoint, manifest).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
