//! Crate-wide error type. Variants are grouped by how a caller should react:
//! malformed inputs, missing upstream artifacts, or a numerically/logically
//! failed run. `ErrorClass` is the CLI's exit-code contract.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure family, stable across variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Unreadable or malformed input: bad file, bad shape, bad value range.
    Format,
    /// A required artifact (checkpoint, data file) is absent or stale.
    Dependency,
    /// The computation itself failed: degenerate matrix, divergence, contract
    /// violation, unusable domain data.
    Domain,
}

impl ErrorClass {
    /// Process exit code used by the CLI for this failure family.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Format => 2,
            ErrorClass::Dependency => 3,
            ErrorClass::Domain => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    FileFormat { path: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("domain failure: {0}")]
    Domain(String),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. }
            | Error::FileFormat { .. }
            | Error::Shape(_)
            | Error::Data(_)
            | Error::Config(_) => ErrorClass::Format,
            Error::Dependency(_) => ErrorClass::Dependency,
            Error::Degenerate(_)
            | Error::IllConditioned(_)
            | Error::Divergence(_)
            | Error::Contract(_)
            | Error::Domain(_) => ErrorClass::Domain,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn file_format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::FileFormat { path: path.as_ref().display().to_string(), reason: reason.into() }
    }
}
