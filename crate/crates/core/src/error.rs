//! Error types shared across the library.
//!
//! Every fallible operation returns [`Error`]. Variants are coarse on purpose:
//! callers branch on the *kind* of failure (bad shapes vs. bad config vs. a
//! corrupt file), not on individual messages.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is outside its documented range.
    #[error("config error: {0}")]
    Config(String),

    /// A label or label component is outside the valid range.
    #[error("label error: {0}")]
    Label(String),

    /// An API precondition was violated (programming error, not data error).
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity. Never ignored.
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    /// Two evaluations that must agree bit-for-bit did not.
    #[error("determinism error: {0}")]
    Determinism(String),

    /// Training diverged or could not make progress.
    #[error("training error at step {step}: {detail}")]
    Training { step: usize, detail: String },

    /// A checkpoint file could not be read or written.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// An adversarial-set file could not be read or written.
    #[error("adversarial set error: {0}")]
    AdvSet(String),

    /// A dataset is malformed or inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A dataset file is not in its documented on-disk format.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failure modes of the binary checkpoint format, kept distinct so tests and
/// callers can tell a wrong file apart from a damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
