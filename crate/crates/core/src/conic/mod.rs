//! Solver-agnostic linear, second-order cone and semidefinite programs.
//!
//! Programs are built from [`LinExpr`] slacks placed in cones. [`Solver`]
//! dispatches to a [`ConicBackend`], then recomputes the primal residual and
//! duality gap itself before reporting `Optimal`.

mod dump;
mod expr;
mod program;
mod solver;
mod transform;

use thiserror::Error;

pub use dump::to_cbf;
pub use expr::{LinExpr, Var};
pub use program::{
    Capability, ConicProgram, Constraint, ConstraintId, Objective, PsdBlock, Sense, SymVar, VarBlock, VarKind,
};
pub use solver::{
    CappedBackend, ClarabelBackend, ConicBackend, DualBlock, RawSolution, RawStatus, Solution, SolveStats, Solver,
    SolverSettings, Status, Tolerances,
};
pub use transform::{pnorm_power_epigraph, quadratic_nonneg_to_psd, AffineQuadratic, PNorm, QuadraticForm};

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("backend {backend} cannot solve programs that need {required:?}")]
    Unsupported { backend: String, required: Capability },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("program is infeasible")]
    Infeasible,
    #[error("program is unbounded")]
    Unbounded,
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
}
