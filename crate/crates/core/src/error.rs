use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad key, out-of-range value, shape mismatch in a
    /// network spec, infeasible environment layout.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called with arguments that violate its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values appeared during training.
    #[error("numeric abort in {module}: {detail}")]
    Numeric { module: String, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(module: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            module: module.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
