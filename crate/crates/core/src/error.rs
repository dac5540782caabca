use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ellipticity violated: least eigenvalue of sigma*sigma^T is {kappa:e}")]
    EllipticityViolated { kappa: f64 },

    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),

    #[error("invalid noise level epsilon = {0}")]
    InvalidEpsilon(f64),

    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("empty deflation: delta {delta} removes the whole domain")]
    EmptyDeflation { delta: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("trajectory diverged at t = {t}")]
    TrajectoryDiverged { t: f64 },

    #[error("path diverged at step {step} of path {path}")]
    PathDiverged { path: u64, step: u64 },

    #[error("horizon too long for sample size: no survivors at T = {horizon}")]
    NoSurvivors { horizon: f64 },

    #[error("incompatible grids: {0}")]
    IncompatibleGrid(String),

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("factorization failed at shift {shift}")]
    FactorizationFailed { shift: f64 },

    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:e})")]
    EigenNotConverged { iterations: usize, residual: f64 },

    #[error("partial result: {0}")]
    PartialResult(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
