use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The variants follow the failure classes used by the command-line front end:
/// input/configuration problems, violated preconditions, numerical breakdowns
/// and unmet quality gates.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The input is well-formed but carries too little information.
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A documented precondition of the caller was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// An iterative method failed or produced non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// A quality gate (e.g. minimum accuracy before compression) was not met.
    #[error("gate failure: {0}")]
    Gate(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
