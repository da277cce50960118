//! Error type shared by the library surface.

use thiserror::Error;

/// Errors raised by geometry, validation, and numeric checks.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or patch-grid mismatch.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// Precondition violated by a caller-supplied value.
    #[error("validation error: {0}")]
    Validation(String),
    /// Non-finite value encountered where finite math is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Operation invoked in a state that cannot serve it.
    #[error("state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
