use thiserror::Error;

/// Errors produced by the rate-function engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LdpError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("reference kernel has zero operator norm")]
    ZeroReference,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not symmetric positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("quadrature result violates positive semidefiniteness (min eigenvalue {0:e})")]
    QuadratureUnstable(f64),

    #[error("quadrature dimension {0} too large and Monte Carlo fallback disabled")]
    DimensionTooLarge(usize),

    #[error("moment generating function diverges at the requested tilt")]
    Diverged,

    #[error("kernel value must be strictly positive, got {0}")]
    NonPositiveKernel(f64),

    #[error("inner Legendre transform did not converge (gradient norm {0:e})")]
    InnerNotConverged(f64),

    #[error("posterior variance is degenerate ({0:e})")]
    DegenerateVariance(f64),

    #[error("non-finite gradient in chain {chain} at step {step}")]
    NonFiniteGradient { chain: usize, step: usize },
}

pub type Result<T> = std::result::Result<T, LdpError>;
