use std::path::Path;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, invalid or inconsistent input data; exit code 2.
    #[error("{path}: {message}")]
    Data { path: String, message: String },
}

impl CliError {
    pub fn data(path: impl AsRef<Path>, err: impl std::fmt::Display) -> Self {
        Self::Data {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn io(path: impl AsRef<Path>, err: std::io::Error) -> Self {
        Self::data(path, err)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data { .. } => 2,
        }
    }

    /// One-line JSON rendering for stderr.
    pub fn to_line(&self) -> String {
        let value = match self {
            Self::Usage(message) => json!({"error": "usage", "message": message}),
            Self::Data { path, message } => {
                json!({"error": "data", "path": path, "message": message})
            }
        };
        value.to_string()
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
