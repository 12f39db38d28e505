use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Binary file parse failures. Every variant carries the byte offset at
/// which the reader gave up.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("bad magic {found:?} at offset {offset} (expected {expected:?})")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported version {found} at offset {offset} (expected {expected})")]
    VersionMismatch { offset: u64, expected: u32, found: u32 },
    #[error("truncated payload at offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },
    #[error("dimension overflow at offset {offset}: {what}")]
    DimOverflow { offset: u64, what: String },
    #[error("invalid value at offset {offset}: {what}")]
    InvalidValue { offset: u64, what: String },
    #[error("{extra} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
}

impl ParseError {
    pub fn offset(&self) -> u64 {
        match self {
            ParseError::BadMagic { offset, .. }
            | ParseError::VersionMismatch { offset, .. }
            | ParseError::Truncated { offset, .. }
            | ParseError::DimOverflow { offset, .. }
            | ParseError::InvalidValue { offset, .. }
            | ParseError::TrailingBytes { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("parse error: {0}")]
    Parse(#[from] ParseError),

    #[error("capacity exceeded: {what} ({size} > cap {cap})")]
    Capacity { what: String, size: usize, cap: usize },

    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("operator is not positive definite (curvature {curvature:.3e} at iteration {iteration}); a larger damping may help")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("non-finite value in {what} at index {index} (optimizer step {step})")]
    NonFinite { what: String, index: usize, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
