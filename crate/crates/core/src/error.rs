use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid grid spec, scene config, training config or registry lookup.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or map shapes that do not agree with each other.
    #[error("shape contract violated: {0}")]
    Shape(String),

    #[error("dataset format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset corrupted in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    /// Generic data problem (infeasible scene, split mismatch, empty input).
    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Checkpoint(_) => 2,
            Error::Format { .. } | Error::Corrupt { .. } | Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
            Error::Tensor(_) => 4,
        }
    }
}
