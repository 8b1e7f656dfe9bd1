use std::path::PathBuf;

use sarcasm_tensor::{GradCheckError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the contents of input files rather than by settings.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            CoreError::Data(_) | CoreError::Io { .. } | CoreError::Checkpoint(_)
        )
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
