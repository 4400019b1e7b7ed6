use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or inconsistent input data.
    #[error("validation error: {0}")]
    Validation(String),

    /// A statistical fit could not be computed from the given data.
    #[error("fit error: {0}")]
    Fit(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    /// The requested exhaustive search exceeds the configured combination limit.
    #[error("refusing brute force: {count} combinations exceed the limit of {limit}")]
    TooManyCombinations { count: u128, limit: u128 },

    /// Failure reading an input file.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure writing an output file or directory.
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Write {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user input rather than an internal failure.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Write { .. } | Error::Internal(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
