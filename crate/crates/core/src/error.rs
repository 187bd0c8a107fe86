use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A malformed input row; `line` is 1-based.
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: String, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid container: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), detail: detail.into() }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for failures caused by non-finite values (divergence).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}
