use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: operands live on different time grids")]
    GridMismatch,

    #[error(
        "no finite maximum-likelihood path: m = {events} events, but the compatibility \
         condition m = \u{222b} exp(s) dt has no finite solution for m = 0"
    )]
    NoSolution { events: usize },

    #[error(
        "Newton iteration did not converge after {iterations} iterations \
         (gradient max-norm {grad_norm:.3e}, tolerance {tolerance:.3e})"
    )]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        tolerance: f64,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error(
        "time resolution too coarse: exp(max s)*dt = {rate_dt:.3} exceeds 0.1; \
         use at least {required_steps} steps"
    )]
    ResolutionTooCoarse { rate_dt: f64, required_steps: usize },

    #[error(
        "shape window too small: half-width {half_width:.4} < required {required_half_width:.4}"
    )]
    Coverage {
        half_width: f64,
        required_half_width: f64,
    },

    #[error("sampler instability at fictitious time {u:.4} (|x| = {magnitude:.3e}); reduce du")]
    Instability { u: f64, magnitude: f64 },

    #[error(
        "insufficient effective samples at node {node}: {effective:.1} < {required}; \
         run at least {required_samples} retained samples"
    )]
    InsufficientSamples {
        node: usize,
        effective: f64,
        required: usize,
        required_samples: usize,
    },

    #[error("consistency failure: {0}")]
    ConsistencyFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
