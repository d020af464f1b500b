use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Load {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0} is empty")]
    EmptyInput(String),

    #[error("cannot decompose pinyin syllable {text:?}: {reason}")]
    Syllable { text: String, reason: &'static str },

    #[error("character {0:?} is not in the pinyin table")]
    UnknownCharacter(char),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("softmax row {row} is entirely masked")]
    FullyMasked { row: usize },

    #[error("all positions are ignored; loss is undefined")]
    NoTargets,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("length mismatch in sentence {index}: {detail}")]
    LengthMismatch { index: usize, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn load(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Shape { .. } | Error::FullyMasked { .. } | Error::NoTargets | Error::NonFinite(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}
