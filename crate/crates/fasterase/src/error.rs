//! Crate-wide error type.
//!
//! Errors are grouped into the categories the command line maps to distinct
//! exit codes: configuration problems, data/file problems, and numeric
//! faults (non-finite values, impossible tensor shapes at runtime).

use thiserror::Error;

/// Process exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for data and file-format errors.
pub const EXIT_DATA: i32 = 3;
/// Process exit code for numeric faults.
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad values, inconsistent settings, unknown keys.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid or corrupt data: corpus files, checkpoints, missing inputs.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric fault: non-finite values, divergent training, bad shapes.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Underlying I/O failure (reported with the data exit code).
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// The process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => EXIT_CONFIG,
            Error::Data(_) | Error::Io(_) => EXIT_DATA,
            Error::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
