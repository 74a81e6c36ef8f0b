use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data or configuration violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("missing modality `{0}`")]
    MissingModality(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// True when the error stems from bad inputs rather than a failure while running.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. })
    }
}
