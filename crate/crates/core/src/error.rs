use std::io;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The variants map onto three coarse families used by the command line
/// front-end for exit codes: configuration ([`Error::Config`],
/// [`Error::Plan`]), data ([`Error::Io`], [`Error::Format`],
/// [`Error::Dataset`]) and numerics ([`Error::Numerical`]). Shape problems
/// are reported as [`Error::Shape`] and count as configuration errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid transform plan: {0}")]
    Plan(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn plan(msg: impl Into<String>) -> Self {
        Error::Plan(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error: 1 configuration, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Config(_) | Error::Plan(_) => 1,
            Error::Format(_) | Error::Dataset(_) | Error::Io { .. } => 2,
            Error::Numerical(_) => 3,
        }
    }
}
