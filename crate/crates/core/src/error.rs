use std::io;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    /// A file does not follow the NIfTI-1 layout.
    #[error("format error in `{field}`: {detail}")]
    Format { field: &'static str, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A label id or structure name is not part of the schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Two volumes that must share a grid do not.
    #[error("shape mismatch: expected dims {expected:?}, found {found:?}")]
    Shape { expected: [usize; 3], found: [usize; 3] },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("out of range: {0}")]
    Range(String),

    /// Phantom construction failed.
    #[error("generation error in {structure}: {detail}")]
    Generation { structure: String, detail: String },

    /// Volume content does not match the requested interpretation.
    #[error("type error: {0}")]
    Type(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            field,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(detail: impl Into<String>) -> Self {
        Error::Parameter(detail.into())
    }
}
