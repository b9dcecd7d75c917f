use crate::network::NetworkParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "precondition violated: |<x_{i}, x_{j}>| = {inner} exceeds c*d = {bound}"
    )]
    PreconditionViolation {
        i: usize,
        j: usize,
        inner: f64,
        bound: f64,
    },

    #[error("non-finite value while evaluating example {example}")]
    NumericOverflow { example: usize },

    #[error("training diverged at iteration {iteration}")]
    Divergence {
        iteration: usize,
        last_params: Box<NetworkParams>,
    },

    #[error("network does not interpolate the data: nonpositive margins at {indices:?}")]
    NotInterpolated { indices: Vec<usize> },

    #[error("degenerate perturbation direction: |sum y_i x_i| = {norm:e}")]
    DegenerateDirection { norm: f64 },

    #[error("theorem hypothesis violated: c' = m(p+1)/(d+1) = {c_prime} > 1/3 (m = {m}, p = {p}, d = {d})")]
    HypothesisViolated {
        m: usize,
        p: f64,
        d: usize,
        c_prime: f64,
    },

    #[error("nnls did not converge after {iterations} iterations (passive set size {passive})")]
    NnlsNoConvergence { iterations: usize, passive: usize },

    #[error("internal assertion failed: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
