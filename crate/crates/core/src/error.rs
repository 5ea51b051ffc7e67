use thiserror::Error;

use crate::ad::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("time {t} outside [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("step size underflow at t = {t} (dt = {dt:e}); problem looks stiff")]
    Stiff { t: f64, dt: f64 },
    #[error("non-finite state at t = {t}")]
    Diverged { t: f64 },
    #[error("tape would need {needed} bytes, limit is {limit}")]
    Resource { needed: usize, limit: usize },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers rather than by the caller.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Stiff { .. } | Error::Diverged { .. } | Error::Estimation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
