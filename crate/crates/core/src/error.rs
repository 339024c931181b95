use thiserror::Error;

/// Errors raised by field construction, solvers, configuration and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A cross-field or parameter constraint is violated.
    #[error("configuration error [{constraint}]: {message}")]
    Config {
        constraint: &'static str,
        message: String,
    },
    /// Tabulated input failed validation at a specific row.
    #[error("validation error at index {index}: {message}")]
    Validation { index: usize, message: String },
    /// The local spinor gauge is undefined (field reaches the south pole).
    #[error(
        "gauge singularity at grid index {index}: n is within {distance:.3e} of -z where the \
         spinor phase is undefined; rotate the field family so it avoids the south pole"
    )]
    GaugeSingular { index: usize, distance: f64 },
    /// Configuration text could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    /// A monitored numerical invariant (positivity, leakage) was violated.
    #[error("numerical abort: {0}")]
    Numerical(String),
    /// Should not happen when probabilities and norms are computed consistently.
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(constraint: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            constraint,
            message: message.into(),
        }
    }

    /// Process exit code for the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Validation { .. }
            | Error::GaugeSingular { .. }
            | Error::Parse { .. } => 1,
            Error::Numerical(_) => 2,
            Error::Internal(_) | Error::Io(_) | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
