use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Covariance stayed non-positive-definite at every jitter level.
    #[error("covariance matrix is not positive definite (jitter tried: {attempted:?})")]
    NotPositiveDefinite { attempted: Vec<f64> },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("trial log {path}: {message}")]
    TrialLog { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
