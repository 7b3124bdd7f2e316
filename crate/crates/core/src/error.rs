use std::fmt;
use std::io;
use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform to the primitive being applied.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// A primitive produced NaN or infinite values.
    NumericInstability {
        op: String,
        detail: String,
    },
    /// `backward` was called on a tape that has already been consumed.
    TapeConsumed,
    /// A function argument violated its documented precondition.
    InvalidArgument(String),
    /// A configuration value failed validation; the first offending key is named.
    InvalidConfig(String),
    /// Parse failure in a config, grammar, automaton, or class file.
    Parse(String),
    /// Checkpoint serialization or deserialization failure.
    Checkpoint(String),
    Io {
        path: PathBuf,
        source: io::Error,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NumericInstability { op, detail } => {
                write!(f, "numeric instability in {op}: {detail}")
            }
            Error::TapeConsumed => write!(f, "backward called on a consumed tape"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
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

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
