use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FpanError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FpanError {
    /// Incompatible tensor shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// API misuse (backward on a non-scalar, zero fan-in, oversized attention input, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid model, degradation, or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Configuration file parse failure, with the 1-based offending line.
    #[error("{path}:{line}: {message}")]
    ConfigLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Missing, empty, or unusable training/evaluation data.
    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: u64, message: String },

    #[error("non-finite loss at step {step} (lr = {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },
}

impl FpanError {
    pub fn dim(msg: impl Into<String>) -> Self {
        FpanError::Dimension(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        FpanError::Usage(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        FpanError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        FpanError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FpanError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 for usage and
    /// configuration problems, 1 for everything that went wrong at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpanError::Usage(_) | FpanError::Config(_) | FpanError::ConfigLine { .. } => 2,
            _ => 1,
        }
    }
}
