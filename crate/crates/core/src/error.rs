use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite linear predictor at row {row}")]
    NonFinitePredictor { row: usize },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error(
        "solver did not converge after {iterations} iterations (last step {step_norm:.3e}, residual {residual_norm:.3e})"
    )]
    NoConvergence {
        iterations: usize,
        step_norm: f64,
        residual_norm: f64,
        best_beta: Vec<f64>,
    },

    #[error("dense oracle guard exceeded: N_b = {n} > {limit}")]
    GuardExceeded { n: usize, limit: usize },

    #[error("simulation harness error: {0}")]
    Harness(String),

    #[error("state file error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Singular(_) | Error::NoConvergence { .. } | Error::NonFinitePredictor { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
