//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its contract (e.g. stepping a
    /// terminal state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A config value failed validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// The exact enumeration oracle would exceed its leaf budget; callers
    /// should fall back to a large-K Monte-Carlo estimate.
    #[error("exact oracle unavailable: {0}")]
    OracleUnavailable(String),

    /// Training produced a non-finite loss or parameter.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A persisted artifact (checkpoint, task file, log) is malformed.
    #[error("invalid artifact: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
