//! Error type shared across the crate.
//!
//! Shape mismatches in hot numeric kernels are programmer errors and panic via
//! `assert!`; everything a caller can plausibly recover from (stale tapes, bad
//! configs, non-finite values in data paths, I/O) comes back as `Error`.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A gradient tape was built against an earlier version of the network.
    #[error("stale tape: network parameters changed since the forward pass; re-run forward")]
    StaleTape,

    #[error("non-finite value in {context} (sample {index})")]
    NonFinite { context: String, index: usize },

    #[error("unknown environment `{name}`; valid names: {valid}")]
    UnknownEnv { name: String, valid: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("baseline fit failed: {0}")]
    FitFailed(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn non_finite(context: impl Into<String>, index: usize) -> Self {
        Error::NonFinite { context: context.into(), index }
    }
}
