use std::path::PathBuf;

use odetensor::TensorError;
use thiserror::Error;

pub type Result<T, E = ReconError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ReconError {
    /// Invalid settings: unknown family, infeasible mask, bad config line, ...
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    /// A precondition of an operation does not hold.
    #[error("contract error: {0}")]
    Contract(String),

    /// Divergence, non-finite values or a failed tolerance check.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl ReconError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ReconError::Io { path: path.into(), source }
    }

    /// Process exit status: 1 configuration, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ReconError::Config(_) | ReconError::Dimension(_) | ReconError::Contract(_) => 1,
            ReconError::Numeric(_) => 2,
            ReconError::Io { .. } => 3,
            ReconError::Tensor(e) => match e {
                TensorError::Shape { .. } | TensorError::Contract(_) => 1,
                TensorError::NonFinite(_) => 2,
                TensorError::Io(_) | TensorError::Format(_) => 3,
            },
        }
    }
}

/// Lets model code run inside tensor-level callbacks such as checkpointed
/// segments.
impl From<ReconError> for TensorError {
    fn from(e: ReconError) -> Self {
        match e {
            ReconError::Tensor(t) => t,
            ReconError::Numeric(msg) => TensorError::NonFinite(msg),
            other => TensorError::Contract(other.to_string()),
        }
    }
}
