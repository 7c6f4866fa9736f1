use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("integrity error in {}: {reason}", file.display())]
    Integrity { file: PathBuf, reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("numeric failure at step {step}: {detail}")]
    Numeric { step: u64, detail: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn integrity(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity { file: file.into(), reason: reason.into() }
    }

    /// Process exit code used by the command-line driver.
    ///
    /// 2 usage/configuration, 3 data or integrity, 4 numeric failure,
    /// 5 protocol violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) => 2,
            Error::Integrity { .. } | Error::Version { .. } | Error::Io { .. } | Error::Json { .. } => 3,
            Error::Numeric { .. } => 4,
            Error::Protocol(_) => 5,
        }
    }
}
