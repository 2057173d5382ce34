use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter or shape violates a precondition.
    #[error("invalid argument: {0}")]
    Usage(String),
    /// Geometry that has no defined answer, e.g. a zero-length vector.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A file that does not follow the expected binary or text layout.
    #[error("malformed input: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! usage {
    ($($arg:tt)*) => {
        $crate::error::Error::Usage(format!($($arg)*))
    };
}
pub(crate) use usage;
