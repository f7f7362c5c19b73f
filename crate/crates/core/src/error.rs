use thiserror::Error;

/// Errors raised by the solvers and checkers.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    /// A model or configuration failed validation.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// A state or coefficient became non-finite, or an inner solve failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An iteration did not converge and the caller asked for a hard failure.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// The requested array sizes exceed the configured budget.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
