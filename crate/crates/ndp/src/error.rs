//! Crate-wide error type.

use std::fmt;
use std::io;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, NdpError>;

/// Errors produced by the library.
#[derive(Debug)]
pub enum NdpError {
    /// A shape contract was violated; names the operation and both shapes.
    ShapeMismatch { op: &'static str, detail: String },
    /// A value that must be finite was NaN or infinite.
    NonFinite { context: String, value: f64 },
    /// Cholesky factorisation failed even after jitter escalation.
    CholeskyFailure { size: usize, final_jitter: f64 },
    /// A caller-supplied argument is out of contract.
    InvalidArgument(String),
    /// Config file could not be parsed (carries the parser's line info).
    ConfigParse(String),
    /// Config parsed but failed validation; names the field.
    ConfigInvalid(String),
    /// Checkpoint file does not start with the `NDPC` magic.
    BadMagic { found: [u8; 4] },
    /// Checkpoint format version is not supported.
    UnsupportedVersion { found: u32 },
    /// Checkpoint file is shorter than its header claims.
    Truncated { expected: u64, found: u64 },
    /// Checkpoint manifest entry points outside the payload.
    OffsetOutOfBounds { name: String, offset: u64, len: u64, payload: u64 },
    Io(io::Error),
}

impl fmt::Display for NdpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Self::NonFinite { context, value } => {
                write!(f, "non-finite value {value} in {context}")
            }
            Self::CholeskyFailure { size, final_jitter } => write!(
                f,
                "cholesky failed for {size}x{size} matrix (final jitter {final_jitter:e})"
            ),
            Self::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Self::ConfigParse(msg) => write!(f, "config parse error: {msg}"),
            Self::ConfigInvalid(msg) => write!(f, "invalid config: {msg}"),
            Self::BadMagic { found } => write!(f, "bad checkpoint magic {found:?}"),
            Self::UnsupportedVersion { found } => {
                write!(f, "unsupported checkpoint version {found}")
            }
            Self::Truncated { expected, found } => {
                write!(f, "truncated checkpoint: expected {expected} bytes, found {found}")
            }
            Self::OffsetOutOfBounds { name, offset, len, payload } => write!(
                f,
                "checkpoint tensor {name} at offset {offset} (+{len}) exceeds payload {payload}"
            ),
            Self::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for NdpError {}

impl From<io::Error> for NdpError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}
