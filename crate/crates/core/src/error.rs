//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by contract violations or numeric breakdown.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A parameter is outside its documented range.
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// An operation that needs at least one element got none.
    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },

    /// A non-finite value surfaced where the contract requires finite data.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Serialized bytes do not parse as the documented wire format.
    #[error("malformed wire data: {0}")]
    MalformedWire(String),

    /// The operation is not defined for this configuration.
    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
