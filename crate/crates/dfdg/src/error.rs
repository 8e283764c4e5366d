//! Crate-wide error type. Every fallible public operation returns
//! [`Result`]; panics are reserved for internal invariant violations.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DfdgError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing dataset files: expected {0}")]
    MissingData(PathBuf),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("weighting error: {0}")]
    Weighting(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DfdgError>;

impl DfdgError {
    /// Attach a path to a raw io error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DfdgError::Io { path: path.into(), source }
    }
}
