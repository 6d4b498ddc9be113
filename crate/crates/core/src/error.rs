use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("sequence too long for sample '{id}': {len} tokens exceeds the limit of {limit}")]
    SequenceTooLong { id: String, len: usize, limit: usize },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("storage error at {path}: {message}")]
    Storage { path: PathBuf, message: String },

    #[error("checkpoint integrity error at byte offset {offset}: {message}")]
    Integrity { offset: u64, message: String },

    #[error("unsupported checkpoint version {found} (this build reads version {supported}); migrate the file before loading")]
    Version { found: u32, supported: u32 },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
}

impl Error {
    pub fn storage(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Storage {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 1,
            Error::Config(_) | Error::Version { .. } | Error::MissingPrerequisite(_) => 2,
            Error::InsufficientData(_)
            | Error::SequenceTooLong { .. }
            | Error::Stratification(_)
            | Error::Storage { .. }
            | Error::Integrity { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}
