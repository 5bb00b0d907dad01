use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite after jitter ({context})")]
    NotPositiveDefinite { context: String },

    #[error("stage solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("singular implicit-function system ({context})")]
    SingularSystem { context: String },

    #[error("constraint is singular: |x3| = {x3:.3e} is below the floor {floor:.1e}")]
    SingularConstraint { x3: f64, floor: f64 },

    #[error("singular dynamics: {0}")]
    Singularity(String),

    #[error("step size underflow at t = {t}: h = {h:.3e}")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("too many solver failures in epoch {epoch}: {failed} of {total} windows")]
    SolverFailureRate {
        epoch: usize,
        failed: usize,
        total: usize,
    },

    #[error("no eligible checkpoint for model selection")]
    NoEligibleCheckpoint,

    #[error("unknown system '{0}'")]
    UnknownSystem(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::StepFailed { .. } => e,
            e => Error::StepFailed {
                step,
                source: Box::new(e),
            },
        }
    }

    /// True for failures of the implicit stage solver, possibly wrapped with a step index.
    pub fn is_solver_failure(&self) -> bool {
        match self {
            Error::NonConvergence { .. }
            | Error::SingularSystem { .. }
            | Error::SingularConstraint { .. } => true,
            Error::StepFailed { source, .. } => source.is_solver_failure(),
            _ => false,
        }
    }
}

impl Error {
    /// Solver failures plus non-finite or singular rollout states.
    pub fn is_rollout_failure(&self) -> bool {
        match self {
            Error::Singularity(_) => true,
            Error::StepFailed { source, .. } => source.is_rollout_failure(),
            e => e.is_solver_failure(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
