//! Crate-wide error type.
//!
//! Everything that can fail — shape mismatches, bad configs, I/O, numeric
//! divergence — funnels into [`Error`] so callers (and the CLI exit-code
//! mapping) can match on one enum.

use thiserror::Error;

/// Unified error for all fallible operations in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected form) disagree on shape.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument was outside its documented domain (log of a non-positive
    /// value, bad stride, axis out of range, ...).
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A value that must stay finite did not (training divergence, scale
    /// blow-up inside a coupling unit, ...).
    #[error("non-finite value in {context}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        context: &'static str,
        step: Option<usize>,
    },

    /// A numeric check failed: quantities that must agree did not
    /// (analytic vs finite-difference gradients, density mass, ...).
    #[error("numeric divergence in {context}: {msg}")]
    Divergence {
        context: &'static str,
        msg: String,
    },

    /// Configuration file or field rejected.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized model or dataset failed validation.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Stored checksum does not match the blob on disk.
    #[error("checksum mismatch for tensor {name}: manifest {expected}, blob {actual}")]
    Checksum {
        name: String,
        expected: String,
        actual: String,
    },

    /// Manifest version this build does not understand.
    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    /// A dataset line failed to parse.
    #[error("{path}:{line}: malformed record: {msg}")]
    MalformedRecord {
        path: String,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand used by ops that compare shapes.
    pub fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
