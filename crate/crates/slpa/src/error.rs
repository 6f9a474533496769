use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or rank disagreement between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid model, loss or training configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed file contents (bad magic, truncation, version mismatch).
    #[error("format error: {0}")]
    Format(String),

    /// Dataset does not satisfy a sampling or split precondition.
    #[error("data error: {0}")]
    Data(String),

    /// NaN or non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape(_) | Error::Format(_) | Error::Data(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
