use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed dump bytes: wrong magic, bad header, truncation.
    #[error("format error: {0}")]
    Format(String),

    /// Well-formed input that violates a data invariant (non-finite values,
    /// inconsistent metadata, un-rotated data required).
    #[error("validation error: {0}")]
    Validation(String),

    #[error("undefined angle: {0}")]
    UndefinedAngle(String),

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by unreadable or malformed input files.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Io(_))
    }
}
