use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Array extents do not conform for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A precondition on arguments or configuration was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity was produced by a forward computation.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at iteration {iteration} (angle index {angle}, stripe {stripe})")]
    NonFiniteLoss {
        iteration: u64,
        angle: usize,
        stripe: usize,
    },

    /// Malformed binary or text input.
    #[error("format error at offset {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// A metric could not be measured on the given data.
    #[error("measurement error: {0}")]
    Measurement(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
