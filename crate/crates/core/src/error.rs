use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input rejected by an operation precondition (shapes, ranges, values).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// A layer in a network description does not chain with its neighbours.
    #[error("layer {index} ({name}): {message}")]
    Dimension {
        index: usize,
        name: String,
        message: String,
    },

    /// Network or layer configuration that cannot be executed as requested.
    #[error("configuration: {0}")]
    Config(String),

    #[error("{}:{offset}: {message}", file.display())]
    Parse {
        file: PathBuf,
        /// Byte offset into the file where the problem was found.
        offset: usize,
        message: String,
    },

    #[error("calibration: {0}")]
    Calibration(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn calibration(msg: impl Into<String>) -> Self {
        Error::Calibration(msg.into())
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category tag used by command-line front ends on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "input",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Calibration(_) => "calibration",
            Error::Io { .. } => "io",
        }
    }
}
