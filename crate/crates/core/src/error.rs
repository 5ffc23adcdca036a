use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A query point or state fell outside the region an object is defined on.
    #[error("domain error: {0}")]
    Domain(String),
    /// Caller passed arguments that violate an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A set that must be nonempty (a TEB slice, a plan) does not exist.
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
