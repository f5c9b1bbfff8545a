use std::path::PathBuf;

use thiserror::Error;

use crate::graph::GradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}: {kind} at byte offset {offset}")]
    Format { path: PathBuf, offset: u64, kind: String },

    #[error("{path}: truncated payload, expected {expected} bytes, found {actual}")]
    Truncated { path: PathBuf, expected: u64, actual: u64 },

    #[error("{path}: line {line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },

    #[error("non-finite loss at iteration {iteration} (batch ids {batch_ids:?})")]
    Diverged { iteration: usize, batch_ids: Vec<usize> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
