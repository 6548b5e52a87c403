//! Error type shared across the library.

use thiserror::Error;

/// Library-wide error type.
///
/// The coarse categories matter to callers: the CLI maps configuration and
/// validation problems to exit code 2 and numeric failures to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    /// An API contract was violated (shape mismatch, bad step index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value showed up where it must not.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// A file could not be parsed.
    #[error("parse error at {location}: {detail}")]
    Parse { location: String, detail: String },

    /// Input data failed validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// An episode could not be sampled from the available pools.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// A group cannot be stratified as requested.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// The evaluation protocol cannot be followed.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Bad run configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that stem from bad configuration or bad input data
    /// rather than a numeric breakdown.
    pub fn is_config_like(&self) -> bool {
        !matches!(self, Error::Numeric { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
