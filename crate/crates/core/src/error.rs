use std::io;

use thiserror::Error;

/// Errors produced by the engine.
///
/// `Validation` and `Domain` are caller mistakes (bad arguments, bad
/// shapes); everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {what} has zero norm")]
    Domain { what: &'static str },

    #[error("bad file header: {0}")]
    BadHeader(String),

    #[error("truncated file: expected {expected} more bytes at offset {offset}")]
    Truncated { offset: usize, expected: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by invalid input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Domain { .. }
                | Error::BadHeader(_)
                | Error::Truncated { .. }
                | Error::DimensionMismatch { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
