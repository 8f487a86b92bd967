//! Common error type for simulation, analysis, and file handling.

use std::fmt;

use crate::timing::EmgFit;

#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value or combination.
    Config(String),
    /// Invalid argument to an analysis or model function.
    Domain(String),
    /// A file could not be read or written.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// A data file failed to parse. `line` is 1-based.
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    /// Event stream timestamps are not monotone nondecreasing.
    UnsortedEvents { index: usize },
    /// The peak fit ran out of iterations; `best` holds the last iterate.
    FitDidNotConverge {
        best: Box<EmgFit>,
        iterations: usize,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Domain(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Parse {
                path,
                line,
                message,
            } => {
                write!(f, "parse error in {path} at line {line}: {message}")
            }
            Error::UnsortedEvents { index } => {
                write!(
                    f,
                    "event stream is not sorted by timestamp (record {index})"
                )
            }
            Error::FitDidNotConverge { iterations, .. } => {
                write!(f, "peak fit did not converge after {iterations} iterations")
            }
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

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
