use thiserror::Error;

/// Failures of a subcommand, classified by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerics(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<kedmd::Error> for CliError {
    fn from(err: kedmd::Error) -> Self {
        use kedmd::Error as E;
        match err {
            E::Factorization { .. } | E::Numerical(_) => CliError::Numerics(err.to_string()),
            E::Solver(_) => CliError::Solver(err.to_string()),
            E::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Validation(err.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(err: csv::Error) -> Self {
        CliError::Io(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
