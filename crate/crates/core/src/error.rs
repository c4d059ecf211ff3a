use thiserror::Error;

/// Errors produced by the solvers and experiment drivers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    LinearSolve { iterations: usize, residual: f64 },

    #[error("outer conjugate gradient did not converge after {iterations} iterations (relative residual {residual:e})")]
    OuterSolve { iterations: usize, residual: f64 },

    #[error("unobservable configuration: {0}")]
    Unobservable(String),

    #[error("frequency undefined at time level {level}: vanishing weighted mass")]
    FrequencyUndefined { level: usize },

    #[error("time set has no interval component")]
    EmptyTimeSet,

    #[error("stability guard violated: tau * L = {0} >= 1")]
    Stability(f64),

    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
