use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI prints these through [`Error::kind`] so callers can match on a
/// stable machine-readable tag.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("unknown accent id {0:?}")]
    Routing(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },
    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Routing(_) => "routing",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Protocol(_) => "protocol",
            Error::Length { .. } => "length",
            Error::Index { .. } => "index",
            Error::Parse(_) => "parse",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
