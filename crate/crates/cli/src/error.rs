use cxinpaint_core::Error;
use thiserror::Error as ThisError;

/// Process exit codes.
pub mod exit {
    pub const OTHER: u8 = 1;
    pub const IO: u8 = 2;
    pub const MANIFEST: u8 = 3;
    pub const NON_FINITE: u8 = 4;
    pub const SIZE_MISMATCH: u8 = 5;
}

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: String, actual: String },

    #[error("{0}")]
    Usage(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::SizeMismatch { .. } => exit::SIZE_MISMATCH,
            CliError::Usage(_) => exit::OTHER,
            CliError::Core(e) => match e {
                Error::Io(_)
                | Error::Ingest { .. }
                | Error::NotACheckpoint(_)
                | Error::VersionMismatch { .. }
                | Error::Truncated(_)
                | Error::CorruptHeader(_)
                | Error::DtypeMismatch { .. } => exit::IO,
                Error::Manifest(_) => exit::MANIFEST,
                Error::NonFinite { .. } => exit::NON_FINITE,
                Error::Extraction { .. } | Error::ShapeMismatch { .. } => exit::SIZE_MISMATCH,
                Error::Contract(_) | Error::Config(_) => exit::OTHER,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
