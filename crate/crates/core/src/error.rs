//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by tensor ops, model building, training, data handling
/// and persistence.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an op. `op` names the graph node.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// An op produced NaN or Inf.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    /// A scalar was required (loss nodes, predictions).
    #[error("{0} must be a scalar")]
    NotScalar(String),

    /// Bad argument outside the shape system (ranges, indices, sizes).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Empty input where at least one element is required.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Training diverged (NaN loss); the caller gets the last good state.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed persisted file (bad magic, truncated section, parse failure).
    #[error("format error in {what}: {detail}")]
    Format { what: String, detail: String },

    /// Persisted checksum does not match the payload.
    #[error("checksum mismatch in {0}; file is corrupt")]
    ChecksumMismatch(String),

    /// Checkpoint holds a different model kind than requested.
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    /// Persisted format version not supported by this build.
    #[error("unsupported format version {found} for {what} (supported: {supported})")]
    VersionMismatch {
        what: String,
        found: u32,
        supported: u32,
    },

    /// Configuration file problems (unknown key, bad value, missing file).
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }

    /// Coarse category used by the CLI for machine-parsable exit lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::NonFinite { .. } | Error::NotScalar(_) => "tensor",
            Error::InvalidArgument(_) | Error::EmptyInput(_) => "argument",
            Error::Diverged { .. } => "train",
            Error::Io(_) => "io",
            Error::Format { .. }
            | Error::ChecksumMismatch(_)
            | Error::KindMismatch { .. }
            | Error::VersionMismatch { .. } => "format",
            Error::Config(_) => "config",
        }
    }
}
