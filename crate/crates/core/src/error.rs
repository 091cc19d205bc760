use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("cannot extract patches from image {image}: {reason}")]
    Extraction { image: String, reason: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("not a checkpoint (magic {0:?})")]
    NotACheckpoint([u8; 4]),

    #[error("unsupported {kind} version {found}, expected {expected}")]
    VersionMismatch { kind: &'static str, found: u32, expected: u32 },

    #[error("truncated {0}")]
    Truncated(&'static str),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint holds {found} data, expected {expected}")]
    DtypeMismatch { found: String, expected: &'static str },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
