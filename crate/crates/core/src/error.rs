use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at coordinate {index}: {context}")]
    NonFinite { index: usize, context: String },

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("index {index} out of range for {what} with {len} entries")]
    Lookup {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("incompatible checkpoint: field `{field}` expected {expected}, found {found}")]
    Compat {
        field: String,
        expected: String,
        found: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
