use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("wire format error: {0}")]
    Wire(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad inputs or bugs).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
