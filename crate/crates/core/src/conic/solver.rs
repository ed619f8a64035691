use std::sync::Arc;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};

use super::expr::{LinExpr, Var};
use super::program::{Capability, ConicProgram, Constraint, ConstraintId, Sense, SymVar};
use super::ConicError;

/// Feasibility and duality-gap tolerances, split by program class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub lp_feas_tol: f64,
    pub lp_gap_tol: f64,
    pub conic_feas_tol: f64,
    pub conic_gap_tol: f64,
    pub max_iter: u32,
    #[serde(default)]
    pub verbose: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            lp_feas_tol: 1e-8,
            lp_gap_tol: 1e-8,
            conic_feas_tol: 1e-7,
            conic_gap_tol: 1e-7,
            max_iter: 500,
            verbose: false,
        }
    }
}

impl SolverSettings {
    /// Same feasibility tolerance for every program class.
    pub fn with_feas_tol(mut self, tol: f64) -> Self {
        self.lp_feas_tol = tol;
        self.conic_feas_tol = tol;
        self
    }

    pub fn with_gap_tol(mut self, tol: f64) -> Self {
        self.lp_gap_tol = tol;
        self.conic_gap_tol = tol;
        self
    }

    pub fn tolerances_for(&self, cap: Capability) -> Tolerances {
        match cap {
            Capability::Linear => Tolerances {
                feas: self.lp_feas_tol,
                gap: self.lp_gap_tol,
                max_iter: self.max_iter,
                verbose: self.verbose,
            },
            _ => Tolerances {
                feas: self.conic_feas_tol,
                gap: self.conic_gap_tol,
                max_iter: self.max_iter,
                verbose: self.verbose,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    pub feas: f64,
    pub gap: f64,
    pub max_iter: u32,
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// What a backend hands back before certification.
#[derive(Clone, Debug)]
pub enum RawStatus {
    Solved,
    ReducedAccuracy,
    PrimalInfeasible,
    DualInfeasible,
    Failed(String),
}

/// Backend output in the slack convention of [`Constraint`]: one dual entry per
/// constraint row, PSD blocks in scaled upper-triangle (svec) order.
#[derive(Clone, Debug)]
pub struct RawSolution {
    pub status: RawStatus,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub iterations: u32,
    pub solve_time: f64,
}

/// A conic solver that can report primal and dual values.
pub trait ConicBackend: Send + Sync {
    fn name(&self) -> &str;
    fn capability(&self) -> Capability;
    /// Solves `min objective` (the caller has already flipped maximization).
    fn solve_min(&self, program: &ConicProgram, q: &[f64], tol: &Tolerances) -> Result<RawSolution, ConicError>;
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: u32,
    pub solve_time: f64,
    pub primal_residual: f64,
    pub duality_gap: f64,
}

/// Dual values for one constraint block.
#[derive(Clone, Debug)]
pub enum DualBlock {
    Vector(Vec<f64>),
    Matrix(nalgebra::DMatrix<f64>),
}

impl DualBlock {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            DualBlock::Vector(v) => v,
            DualBlock::Matrix(m) => m.as_slice(),
        }
    }
}

/// Certified result of a solve.
#[derive(Clone, Debug)]
pub struct Solution {
    pub status: Status,
    pub primal: Vec<f64>,
    pub dual: Vec<DualBlock>,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub stats: SolveStats,
}

impl Solution {
    fn with_status(status: Status, stats: SolveStats) -> Self {
        Self {
            status,
            primal: Vec::new(),
            dual: Vec::new(),
            objective_value: f64::NAN,
            dual_objective: f64::NAN,
            stats,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    /// Converts a non-optimal status into the matching error.
    pub fn into_optimal(self) -> Result<Solution, ConicError> {
        match self.status {
            Status::Optimal => Ok(self),
            Status::Infeasible => Err(ConicError::Infeasible),
            Status::Unbounded => Err(ConicError::Unbounded),
            Status::NumericalFailure => Err(ConicError::NumericalFailure(
                "solver did not certify the result".into(),
            )),
        }
    }

    pub fn value(&self, e: &LinExpr) -> f64 {
        e.eval(&self.primal)
    }

    pub fn var(&self, v: Var) -> f64 {
        self.primal[v.index()]
    }

    pub fn vars(&self, vs: &[Var]) -> Vec<f64> {
        vs.iter().map(|v| self.var(*v)).collect()
    }

    pub fn sym(&self, s: &SymVar) -> nalgebra::DMatrix<f64> {
        s.value(&self.primal)
    }

    pub fn dual(&self, id: ConstraintId) -> &DualBlock {
        &self.dual[id.index()]
    }
}

/// Backend plus settings. All safety computations go through this type.
#[derive(Clone)]
pub struct Solver {
    backend: Arc<dyn ConicBackend>,
    pub settings: SolverSettings,
}

impl Default for Solver {
    fn default() -> Self {
        Self::new(Arc::new(ClarabelBackend), SolverSettings::default())
    }
}

impl std::fmt::Debug for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Solver")
            .field("backend", &self.backend.name())
            .field("settings", &self.settings)
            .finish()
    }
}

impl Solver {
    pub fn new(backend: Arc<dyn ConicBackend>, settings: SolverSettings) -> Self {
        Self { backend, settings }
    }

    pub fn with_settings(settings: SolverSettings) -> Self {
        Self::new(Arc::new(ClarabelBackend), settings)
    }

    pub fn capability(&self) -> Capability {
        self.backend.capability()
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Fails early when the backend cannot handle `cap`.
    pub fn require(&self, cap: Capability) -> Result<(), ConicError> {
        if self.backend.capability() < cap {
            return Err(ConicError::Unsupported {
                backend: self.backend.name().to_string(),
                required: cap,
            });
        }
        Ok(())
    }

    /// Solves and certifies. Optimal is reported only when the primal residual
    /// and the duality gap, recomputed here from the returned primal/dual
    /// pair, are within tolerance.
    pub fn solve(&self, program: &ConicProgram) -> Result<Solution, ConicError> {
        program.validate()?;
        let cap = program.required_capability();
        self.require(cap)?;
        let tol = self.settings.tolerances_for(cap);

        let obj = program.objective();
        let sign = match obj.sense {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        };
        let mut q = vec![0.0; program.num_vars()];
        for &(v, a) in &obj.expr.terms {
            q[v.index()] += sign * a;
        }

        let raw = self.backend.solve_min(program, &q, &tol)?;
        let mut stats = SolveStats {
            iterations: raw.iterations,
            solve_time: raw.solve_time,
            ..Default::default()
        };
        match raw.status {
            RawStatus::PrimalInfeasible => return Ok(Solution::with_status(Status::Infeasible, stats)),
            RawStatus::DualInfeasible => return Ok(Solution::with_status(Status::Unbounded, stats)),
            RawStatus::Failed(msg) => {
                log::debug!("backend failure: {msg}");
                return Ok(Solution::with_status(Status::NumericalFailure, stats));
            }
            RawStatus::Solved | RawStatus::ReducedAccuracy => {}
        }

        let x = raw.x;
        let primal_obj = obj.expr.eval(&x);
        // dual objective of min qᵀx s.t. s = b - A x ∈ K is -bᵀz; here b holds
        // the constants of each slack expression
        let mut dual_min = 0.0;
        let mut duals = Vec::with_capacity(program.constraints().len());
        let mut row = 0;
        for c in program.constraints() {
            let rows = c.rows();
            let z = &raw.z[row..row + rows];
            match c {
                Constraint::Psd(b) => {
                    let mut zm = nalgebra::DMatrix::zeros(b.dim, b.dim);
                    let mut k = 0;
                    for j in 0..b.dim {
                        for i in 0..=j {
                            let scale = if i == j { 1.0 } else { std::f64::consts::FRAC_1_SQRT_2 };
                            let svec_b = b.get(i, j).constant / scale;
                            dual_min -= svec_b * z[k];
                            zm[(i, j)] = z[k] * scale;
                            zm[(j, i)] = z[k] * scale;
                            k += 1;
                        }
                    }
                    duals.push(DualBlock::Matrix(zm));
                }
                Constraint::Zero(es) | Constraint::Nonneg(es) | Constraint::SecondOrder(es) => {
                    for (e, zi) in es.iter().zip(z) {
                        dual_min -= e.constant * zi;
                    }
                    duals.push(DualBlock::Vector(z.to_vec()));
                }
            }
            row += rows;
        }
        let primal_min = sign * primal_obj;
        let objective_value = primal_obj;
        let dual_objective = sign * (dual_min + sign * obj.expr.constant);

        let residual = program.primal_residual(&x);
        let xinf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let feas_scale = 1f64.max(xinf + program.constant_scale());
        let gap_abs = (primal_min - (dual_min + sign * obj.expr.constant)).abs();
        let gap_rel = gap_abs / 1f64.max(primal_min.abs().min(dual_objective.abs()));
        stats.primal_residual = residual;
        stats.duality_gap = gap_abs;

        // slack of one order of magnitude over the backend's own stopping rule
        // absorbs the difference between its scaled and our unscaled residuals
        let certified = residual <= 10.0 * tol.feas * feas_scale
            && (gap_abs <= 10.0 * tol.gap || gap_rel <= 10.0 * tol.gap);
        if !certified {
            log::warn!(
                "uncertified solution from {}: residual {residual:.3e}, gap {gap_abs:.3e}",
                self.backend.name()
            );
            return Ok(Solution::with_status(Status::NumericalFailure, stats));
        }

        Ok(Solution {
            status: Status::Optimal,
            primal: x,
            dual: duals,
            objective_value,
            dual_objective,
            stats,
        })
    }
}

/// Interior-point backend built on Clarabel. Supports LP, SOC and PSD cones.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClarabelBackend;

impl ConicBackend for ClarabelBackend {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn capability(&self) -> Capability {
        Capability::Semidefinite
    }

    fn solve_min(&self, program: &ConicProgram, q: &[f64], tol: &Tolerances) -> Result<RawSolution, ConicError> {
        let n = program.num_vars();
        let mut ii = Vec::new();
        let mut jj = Vec::new();
        let mut vv = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut row = 0usize;

        // slack s = e(x) = a·x + c is written as s = b - A x with A = -a, b = c
        let mut push_row = |e: &LinExpr, scale: f64, row: usize, b: &mut Vec<f64>| {
            for &(v, a) in &e.terms {
                ii.push(row);
                jj.push(v.index());
                vv.push(-a * scale);
            }
            b.push(e.constant * scale);
        };

        for c in program.constraints() {
            match c {
                Constraint::Zero(es) => {
                    for e in es {
                        push_row(e, 1.0, row, &mut b);
                        row += 1;
                    }
                    cones.push(SupportedConeT::ZeroConeT(es.len()));
                }
                Constraint::Nonneg(es) => {
                    for e in es {
                        push_row(e, 1.0, row, &mut b);
                        row += 1;
                    }
                    cones.push(SupportedConeT::NonnegativeConeT(es.len()));
                }
                Constraint::SecondOrder(es) => {
                    for e in es {
                        push_row(e, 1.0, row, &mut b);
                        row += 1;
                    }
                    if es.len() == 1 {
                        cones.push(SupportedConeT::NonnegativeConeT(1));
                    } else {
                        cones.push(SupportedConeT::SecondOrderConeT(es.len()));
                    }
                }
                Constraint::Psd(blk) => {
                    // upper triangle stacked by columns, off-diagonals scaled by √2
                    for j in 0..blk.dim {
                        for i in 0..=j {
                            let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
                            push_row(blk.get(i, j), scale, row, &mut b);
                            row += 1;
                        }
                    }
                    cones.push(SupportedConeT::PSDTriangleConeT(blk.dim));
                }
            }
        }

        let a = CscMatrix::new_from_triplets(row, n, ii, jj, vv);
        let p = CscMatrix::zeros((n, n));
        let settings = DefaultSettingsBuilder::default()
            .verbose(tol.verbose)
            .max_iter(tol.max_iter)
            .tol_feas(tol.feas)
            .tol_gap_abs(tol.gap)
            .tol_gap_rel(tol.gap)
            .build()
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        let mut solver = DefaultSolver::new(&p, q, &a, &b, &cones, settings)
            .map_err(|e| ConicError::Backend(format!("{e:?}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => RawStatus::Solved,
            SolverStatus::AlmostSolved => RawStatus::ReducedAccuracy,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => RawStatus::PrimalInfeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => RawStatus::DualInfeasible,
            other => RawStatus::Failed(format!("{other:?}")),
        };
        Ok(RawSolution {
            status,
            x: sol.x.clone(),
            z: sol.z.clone(),
            iterations: sol.iterations,
            solve_time: sol.solve_time,
        })
    }
}

/// Wraps a backend and caps its advertised capability. Used to check that
/// callers refuse to run programs the backend cannot handle.
pub struct CappedBackend<B> {
    pub inner: B,
    pub cap: Capability,
}

impl<B: ConicBackend> ConicBackend for CappedBackend<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn capability(&self) -> Capability {
        self.cap.min(self.inner.capability())
    }

    fn solve_min(&self, program: &ConicProgram, q: &[f64], tol: &Tolerances) -> Result<RawSolution, ConicError> {
        self.inner.solve_min(program, q, tol)
    }
}
