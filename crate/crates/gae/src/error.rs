//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Errors surfaced by the training and evaluation pipeline.
///
/// `Config` maps to process exit code 2, `TrainAbort` to exit code 3;
/// everything else is a generic failure.
#[derive(Debug, thiserror::Error)]
pub enum GaeError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{0}")]
    Other(String),
}

impl GaeError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code contract: 0 success, 2 config error, 3 training abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::TrainAbort(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, GaeError>;
