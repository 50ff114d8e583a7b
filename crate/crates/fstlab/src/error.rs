//! Crate-wide error type with stable machine-readable codes.

use std::fmt;
use std::path::PathBuf;

/// Everything in this crate that can fail returns this error.
///
/// Each variant carries a human-readable message; [`Error::code`] returns a
/// stable machine-readable code suitable for tooling.
#[derive(Debug)]
pub enum Error {
    /// Structural misconfiguration: incompatible layer shapes, mismatched
    /// parameter registries, invalid hyperparameters.
    Config { message: String },
    /// Invalid data handed to an operation: labels out of range, patterns
    /// larger than the image, not enough eligible samples.
    Input { message: String },
    /// A file could not be decoded. `code` distinguishes the failure class.
    Parse { code: &'static str, message: String },
    /// Training diverged or otherwise failed; `epoch` is where it happened.
    Train { epoch: usize, message: String },
    /// A numerically degenerate state (e.g. zero head norm before projection).
    Numeric { message: String },
    /// Filesystem failure, with the offending path.
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn config(message: impl Into<String>) -> Self {
        Error::Config { message: message.into() }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Error::Input { message: message.into() }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric { message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable code for this error.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config/invalid",
            Error::Input { .. } => "input/invalid",
            Error::Parse { code, .. } => code,
            Error::Train { .. } => "train/diverged",
            Error::Numeric { .. } => "numeric/degenerate",
            Error::Io { .. } => "io/failed",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { message } => write!(f, "configuration error: {message}"),
            Error::Input { message } => write!(f, "input error: {message}"),
            Error::Parse { code, message } => write!(f, "parse error [{code}]: {message}"),
            Error::Train { epoch, message } => {
                write!(f, "training error at epoch {epoch}: {message}")
            }
            Error::Numeric { message } => write!(f, "numeric error: {message}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
