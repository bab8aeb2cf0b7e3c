use std::fmt;
use std::path::Path;

use dkpkit_core::config::ConfigError;

/// Failure classes that map to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Config(_) => 1,
            AppError::Numeric(_) => 2,
            AppError::Io(_) => 3,
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        AppError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<dkpkit_core::Error> for AppError {
    fn from(e: dkpkit_core::Error) -> Self {
        match e {
            dkpkit_core::Error::NonFinite(_) => AppError::Numeric(e.to_string()),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;
