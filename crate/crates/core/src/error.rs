use std::fmt;
use std::io;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A non-finite value appeared where finite values are required.
    Numeric(String),
    /// Invalid configuration or arguments.
    Config(String),
    /// A cell of an input table could not be parsed.
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    /// Malformed file contents. `offset` is a byte offset when one is known.
    Format {
        message: String,
        offset: Option<u64>,
    },
    /// Attention rows that do not form a probability distribution.
    Integrity(String),
    Io(io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format {
            message: msg.into(),
            offset: None,
        }
    }

    pub fn format_at(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            message: msg.into(),
            offset: Some(offset),
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by user input rather than by the computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Format { .. } | Error::Io(_) | Error::Json(_)
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "dimension error in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Parse {
                row,
                column,
                message,
            } => write!(f, "parse error at row {row}, column {column}: {message}"),
            Error::Format {
                message,
                offset: Some(off),
            } => write!(f, "format error at byte offset {off}: {message}"),
            Error::Format {
                message,
                offset: None,
            } => write!(f, "format error: {message}"),
            Error::Integrity(msg) => write!(f, "integrity error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}
