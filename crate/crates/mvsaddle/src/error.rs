use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point lies outside the domain of the cumulant generating function")]
    DomainViolation,

    #[error("Newton iteration stopped after {iterations} steps with residual {residual:e}")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("step damping could not keep the iterate inside the domain")]
    DomainExit,

    #[error("ordinate lies outside the interior of the mean range")]
    InfeasibleOrdinate,

    #[error("negative radicand {0:e} in a signed root")]
    NegativeRadicand(f64),

    #[error("zero denominator in dtau/dw away from the saddlepoint")]
    ZeroDenominator,

    #[error("curvature block is not positive definite")]
    NonPositiveCurvature,

    #[error("ordinate sits on a removable singularity in coordinate {coordinate}")]
    NearRemovableSingularity { coordinate: usize },

    #[error("signed-root frame is singular: {0}")]
    SingularFrame(String),

    #[error("bad covariance matrix: {0}")]
    BadCovariance(String),

    #[error("conditional density approximation underflowed")]
    DenominatorUnderflow,

    #[error("lattice state space of {0} points is too large to enumerate")]
    StateSpaceTooLarge(u64),

    #[error("numerical integration reached only {0:e}")]
    AccuracyNotReached(f64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;
