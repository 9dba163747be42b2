use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {tensor}: expected {expected}, got {actual}")]
    Shape {
        tensor: String,
        expected: String,
        actual: String,
    },

    #[error("scene generation failed at frame {frame}: {reason}")]
    Generation { frame: usize, reason: String },

    #[error("unknown view id {0}")]
    UnknownView(u32),

    #[error("dataset integrity: {0}")]
    Integrity(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("json {path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl Error {
    pub fn shape(tensor: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            tensor: tensor.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
