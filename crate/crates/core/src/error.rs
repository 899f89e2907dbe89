use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors are split into input validation problems and failures of a
/// numerical routine; the CLI maps the two groups to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to read NPY file {path}: {message}")]
    Npy { path: PathBuf, message: String },

    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("sample ids missing from target dataset: {0:?}")]
    MissingSamples(Vec<String>),

    #[error("degenerate representation: {0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad inputs rather than by a computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Npy { .. }
                | Error::Json { .. }
                | Error::Invalid(_)
                | Error::Shape(_)
                | Error::NonFinite(_)
                | Error::MissingSamples(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Image { .. })
    }
}
