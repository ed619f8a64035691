use thiserror::Error;

use crate::conic::ConicError;
use crate::geometry::GeometryError;
use crate::harness::StepRecord;

/// Failure of a learning session. Variants raised mid-session carry the
/// steps completed before the failure.
#[derive(Debug, Error)]
pub enum LearnError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{0}")]
    Infeasible(String),
    #[error("step {k}: {what} leaves the safety region by {violation:e}")]
    SafetyViolation {
        k: usize,
        what: &'static str,
        violation: f64,
        partial: Vec<StepRecord>,
    },
    #[error("no strictly interior point: {0}")]
    StrictInterior(String),
    #[error("step {k}: observations are inconsistent with the prior")]
    Inconsistent { k: usize, partial: Vec<StepRecord> },
    #[error("step {k}: {source}")]
    Step {
        k: usize,
        #[source]
        source: GeometryError,
        partial: Vec<StepRecord>,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<ConicError> for LearnError {
    fn from(e: ConicError) -> Self {
        LearnError::Geometry(GeometryError::Solver(e))
    }
}

impl LearnError {
    pub fn partial(&self) -> &[StepRecord] {
        match self {
            LearnError::SafetyViolation { partial, .. }
            | LearnError::Inconsistent { partial, .. }
            | LearnError::Step { partial, .. } => partial,
            _ => &[],
        }
    }
}
