use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    /// The quadrature grid cannot resolve the highest frequency of the basis.
    #[error("quadrature grid of {got} points per axis aliases max frequency {max_freq} (need at least {need})")]
    Aliasing { got: usize, max_freq: usize, need: usize },

    #[error("dual solver did not converge after {iterations} iterations (feasibility residual {residual:e})")]
    NonConverged { iterations: usize, residual: f64 },

    #[error("barycenter descent did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    BarycenterNonConverged { iterations: usize, grad_norm: f64 },

    #[error("block is numerically singular: condition number {condition:e} exceeds {limit:e}")]
    SingularBlock { condition: f64, limit: f64 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a solver that ran out of iterations.
    pub fn is_non_converged(&self) -> bool {
        match self {
            Error::NonConverged { .. } | Error::BarycenterNonConverged { .. } => true,
            Error::Context { source, .. } => source.is_non_converged(),
            _ => false,
        }
    }

    /// True when a solver or factorization failed on valid input, as opposed
    /// to bad input or configuration.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::NonConverged { .. } | Error::BarycenterNonConverged { .. } | Error::SingularBlock { .. } => true,
            Error::Context { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
