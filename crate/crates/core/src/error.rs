use thiserror::Error;

/// Errors raised by the library.
///
/// Variants are grouped by the exit class the CLI maps them to: data and
/// configuration problems, numerical failures, and solver failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported capability: {0}")]
    Capability(String),

    #[error("state outside the validity domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("insufficient excitation: {0}")]
    Excitation(String),

    #[error(
        "kernel matrix of size {size} is not numerically positive definite; \
         retry with a regularization parameter of at least {suggested_lambda:.3e}"
    )]
    Factorization { size: usize, suggested_lambda: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solver aborted: {0}")]
    Solver(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Format(err.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        Error::Format(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
