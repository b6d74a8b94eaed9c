use thiserror::Error;

/// Errors raised anywhere in the controller stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("infeasible QP: rows {rows:?} admit no strictly feasible point (max violation {violation:.3e})")]
    InfeasibleProblem { rows: Vec<usize>, violation: f64 },

    #[error("numerical failure in QP Newton system: {0}")]
    NumericalFailure(String),

    #[error("initial state is outside the safe set: barrier {barrier} has h(x0) = {value}")]
    UnsafeStart { barrier: usize, value: f64 },

    #[error(
        "safety violation at iteration {iteration}, batch element {element}, step {step}: \
         barrier {barrier} has h = {value:.6e}"
    )]
    SafetyViolation {
        iteration: usize,
        element: usize,
        step: usize,
        barrier: usize,
        value: f64,
    },

    #[error("QP infeasible at iteration {iteration}, element {element}, step {step}, state {state:?}: {source}")]
    RolloutInfeasible {
        iteration: usize,
        element: usize,
        step: usize,
        state: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value at tape node {node}: {what}")]
    NonFinite { node: usize, what: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
