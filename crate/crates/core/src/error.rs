use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Structural problem in a specification (dimension mismatch, missing field).
    #[error("structure: {0}")]
    Structure(String),
    #[error("population smaller than type count ({n} agents, {k} types)")]
    PopulationTooSmall { n: usize, k: usize },
    #[error("metric: {0}")]
    Metric(String),
    #[error("numeric: {what} (residual {residual:e})")]
    Numeric { what: String, residual: f64 },
    #[error("eigensolver did not converge for {0}")]
    Eigen(String),
    #[error("capacity: ensemble needs {needed} bytes, cap is {cap}")]
    Capacity { needed: u64, cap: u64 },
    #[error("divergence: non-finite value at {0}")]
    Divergence(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("candidate infeasible at node {node}: {reason}")]
    Infeasible { node: usize, reason: String },
    #[error("fit refused: {0}")]
    Fit(String),
    #[error("empty input: {0}")]
    Empty(String),
    /// Configuration text that cannot be turned into a specification.
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
