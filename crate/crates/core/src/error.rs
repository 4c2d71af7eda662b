use thiserror::Error;

/// Errors produced by the core algorithms.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("non-finite value at step {step}: {detail}")]
    Numeric { step: usize, detail: String },

    #[error("correlation undefined: {0}")]
    CorrelationUndefined(String),

    #[error("no threshold pair fits budget {budget:.4}; cheapest achievable cost is {min_cost:.4}")]
    BudgetInfeasible { budget: f64, min_cost: f64 },

    #[error("invalid state: {0}")]
    InvalidState(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
