use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures surfaced by the library. Each variant maps onto one
/// machine-readable category so the CLI can report it without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("diagnostic error: {0}")]
    Diagnostic(String),

    #[error("config hash mismatch for stage `{stage}`:\n{diff}")]
    HashMismatch { stage: String, diff: String },

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Stable short name used in CLI error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Domain(_) => "domain",
            Error::Diagnostic(_) => "diagnostic",
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::Format { .. } | Error::Json(_) | Error::Csv(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "invalid-argument" => 3,
            "domain" => 4,
            "io" => 5,
            "hash-mismatch" => 6,
            "diagnostic" => 7,
            "format" => 8,
            _ => 1,
        }
    }
}
