use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: at byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Pipeline(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, offset: u64, message: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), offset, message: message.into() }
    }

    pub fn pipeline(e: impl std::fmt::Display) -> Self {
        CliError::Pipeline(e.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Format { .. } => "format",
            CliError::Config(_) => "config",
            CliError::Pipeline(_) => "pipeline",
        }
    }

    /// One-line JSON record for the diagnostic stream.
    pub fn record(&self) -> String {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Io { path, .. } => v["path"] = json!(path.display().to_string()),
            CliError::Format { path, offset, .. } => {
                v["path"] = json!(path.display().to_string());
                v["offset"] = json!(offset);
            }
            _ => {}
        }
        v.to_string()
    }
}
