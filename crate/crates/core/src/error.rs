//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Shapes of two values that must agree do not.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// A binary container failed structural validation (magic, version,
    /// checksum). `record` is set when the failure is attributable to a
    /// specific record, `offset` is the byte offset of the failing field.
    #[error("corrupt data at byte {offset}{}: {detail}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Corrupt {
        offset: u64,
        record: Option<usize>,
        detail: String,
    },

    /// File shorter than its header promises.
    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    /// A numeric quantity that must stay finite did not.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A tape value id was used with a tape it does not belong to.
    #[error("value does not belong to this gradient tape")]
    OffTape,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
