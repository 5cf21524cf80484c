use thiserror::Error;

/// Errors produced by the geometry, solver and control layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch in {context}: expected {expected}, found {found}")]
    SizeMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("unsupported configuration: {0}")]
    UnsupportedConfiguration(String),

    #[error("empty control region: {0}")]
    EmptyRegion(String),

    #[error("linear solver failure: {message} (relative residual {residual:.3e})")]
    LinearSolver { message: String, residual: f64 },

    #[error(
        "conjugate gradients did not converge after {iterations} iterations \
         (relative residual {residual:.3e}, target {target:.1e})"
    )]
    CgNotConverged {
        iterations: usize,
        residual: f64,
        target: f64,
        history: Vec<f64>,
    },

    #[error(
        "eigen-iteration did not converge after {iterations} iterations (max change {change:.3e})"
    )]
    EigenNotConverged { iterations: usize, change: f64 },

    #[error("singular weight: {0}")]
    SingularWeight(String),

    #[error("weight overflow: {0}")]
    WeightOverflow(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("fixed-point iteration did not converge in {iterations} iterations (last distance {last:.3e})")]
    FixedPointNotConverged {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::SizeMismatch { .. } => "size-mismatch",
            Error::UnsupportedGeometry(_) => "unsupported-geometry",
            Error::UnsupportedConfiguration(_) => "unsupported-configuration",
            Error::EmptyRegion(_) => "empty-region",
            Error::LinearSolver { .. } => "linear-solver",
            Error::CgNotConverged { .. } => "cg-not-converged",
            Error::EigenNotConverged { .. } => "eigen-not-converged",
            Error::SingularWeight(_) => "singular-weight",
            Error::WeightOverflow(_) => "weight-overflow",
            Error::UndefinedRatio(_) => "undefined-ratio",
            Error::FixedPointNotConverged { .. } => "fixed-point-not-converged",
            Error::InvariantViolation(_) => "invariant-violation",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::SizeMismatch {
            context,
            expected,
            found,
        })
    }
}
