//! Runs a configured experiment against its hidden system, with snapshots,
//! cost bounds and a safety audit.

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conic::{LinExpr, Solver};
use crate::error::LearnError;
use crate::geometry::{project2d, ConicRegion, GeometryError, LiftedPolyhedron, Polygon, Polyhedron, Support, SupportOracle};
use crate::linear_onestep::{
    cost_lower_bound, learn_offline, learn_online, offline_cost_limit, onestep_region, uncertainty_set, LearnOutcome, LearnResult,
    MatrixPolytope, MeasurementSet, OnestepOptions,
};
use crate::linear_twostep::{
    build_twostep_sdp, check_strict_interior, consistent_subspace, default_trajectories, learn_two_step, twostep_cost_lower_bound,
    twostep_offline_cost, EllipsoidalMatrixUncertainty, StrictInterior, TwoStepData, TwostepOptions,
};
use crate::nonlinear_onestep::{
    fit_least_squares, fit_sos_constrained, rmse, safe_explore, sphere_direction, ExploreOptions, NonlinearUncertainty,
    QuadraticVectorModel, SnapshotSpec as ExploreSnapshot, SosFit,
};

use super::config::{matrix_rows, Experiment, Mode, Prior};
use super::log::{Outcome, RunLog, Snapshot, StepRecord};
use super::system::sample_in;

/// `(trace, entry sum)` as a `2 × n²` map on row-major `vec(A)`.
pub fn feature_map(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(2, n * n, |r, i| if r == 1 || i / n == i % n { 1.0 } else { 0.0 })
}

/// Image of a region under a linear map.
pub struct LinearImage<'a> {
    pub inner: &'a dyn SupportOracle,
    pub map: DMatrix<f64>,
}

impl SupportOracle for LinearImage<'_> {
    fn dim(&self) -> usize {
        self.map.nrows()
    }

    fn support(&self, d: &[f64], solver: &Solver) -> Result<Support, GeometryError> {
        let pulled = self.map.transpose() * DVector::from_column_slice(d);
        Ok(match self.inner.support(pulled.as_slice(), solver)? {
            Support::Bounded { value, point } => Support::Bounded {
                value,
                point: &self.map * point,
            },
            other => other,
        })
    }
}

/// Linear image of `{anchor + B â | q̂(â) ≤ 0}`, supported in closed form.
pub struct EllipsoidImage {
    base: DVector<f64>,
    lin: DMatrix<f64>,
    center: DVector<f64>,
    qinv: DMatrix<f64>,
    rho: f64,
}

impl EllipsoidImage {
    pub fn new(u0: &EllipsoidalMatrixUncertainty, data: &TwoStepData, map: &DMatrix<f64>) -> Result<Self, LearnError> {
        let param = consistent_subspace(data)?;
        let base = map * crate::linear_twostep::vec_of(&param.anchor);
        let m = param.n_hat();
        if m == 0 {
            let rho = -u0.quadratic().eval(&crate::linear_twostep::vec_of(&param.anchor));
            return Ok(Self {
                base,
                lin: DMatrix::zeros(map.nrows(), 0),
                center: DVector::zeros(0),
                qinv: DMatrix::zeros(0, 0),
                rho: if rho >= -1e-7 { 0.0 } else { rho },
            });
        }
        let qhat = param.pullback(&u0.quadratic());
        let (center, value) = match check_strict_interior(&qhat, 0.0)? {
            StrictInterior::Point(c) => {
                let v = qhat.eval(&c);
                (c, v)
            }
            StrictInterior::Fails { minimizer, value } => (minimizer, value),
        };
        let qinv = qhat
            .quad
            .clone()
            .try_inverse()
            .ok_or_else(|| LearnError::Invalid("pulled-back prior is singular".into()))?;
        Ok(Self {
            base,
            lin: map * param.basis_matrix(),
            center,
            qinv,
            rho: if value <= 1e-7 { (-value).max(0.0) } else { -value },
        })
    }
}

impl SupportOracle for EllipsoidImage {
    fn dim(&self) -> usize {
        self.base.len()
    }

    fn support(&self, d: &[f64], _solver: &Solver) -> Result<Support, GeometryError> {
        if self.rho < 0.0 {
            return Ok(Support::Empty);
        }
        let d = DVector::from_column_slice(d);
        let w = self.lin.transpose() * &d;
        let qw = &self.qinv * &w;
        let scale = w.dot(&qw).max(0.0).sqrt();
        let mut a = self.center.clone();
        if scale > 0.0 {
            a += qw * (self.rho.sqrt() / scale);
        }
        let point = &self.base + &self.lin * a;
        Ok(Support::Bounded { value: d.dot(&point), point })
    }
}

/// `{A ∈ U₀,A | ‖Axₖ − yₖ‖_∞ ≤ γ‖xₖ‖_p^d}` over row-major `vec(A)`.
pub fn nonlinear_matrix_set(u: &NonlinearUncertainty, data: &MeasurementSet) -> LiftedPolyhedron {
    let n = u.dim();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for (v, r) in u.a.constraints() {
        rows.push(crate::linear_twostep::vec_of(v));
        rhs.push(*r);
    }
    for (x, y) in data.pairs() {
        let slack = u.g_bound(x.as_slice());
        for l in 0..n {
            let mut row = DVector::zeros(n * n);
            for b in 0..n {
                row[l * n + b] = x[b];
            }
            rows.push(row.clone());
            rhs.push(slack + y[l]);
            rows.push(-row);
            rhs.push(slack - y[l]);
        }
    }
    let a = DMatrix::from_fn(rows.len(), n * n, |i, j| rows[i][j]);
    LiftedPolyhedron::new(a, DMatrix::zeros(rhs.len(), 0), DVector::from_vec(rhs)).expect("consistent shapes")
}

/// Polygon of `U_k` in the `(trace, entry sum)` plane.
pub fn uncertainty_snapshot(set: &dyn SupportOracle, directions: usize, solver: &Solver) -> Result<Polygon, GeometryError> {
    let n = (set.dim() as f64).sqrt().round() as usize;
    let image = LinearImage {
        inner: set,
        map: feature_map(n),
    };
    project2d(&image, (0, 1), directions, solver)
}

/// Safety audit of every logged state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub states: usize,
    /// Largest `max_i(hᵢᵀx − bᵢ)` over all states; negative means interior.
    pub worst_violation: f64,
    pub violations: Vec<AuditViolation>,
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditViolation {
    pub k: usize,
    pub state: String,
    pub violation: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn worst_margin(&self) -> f64 {
        -self.worst_violation
    }
}

pub fn audit(steps: &[StepRecord], s: &Polyhedron, tol: f64) -> Result<AuditReport, LearnError> {
    let mut rep = AuditReport {
        states: 0,
        worst_violation: f64::NEG_INFINITY,
        violations: Vec::new(),
        tol,
    };
    for st in steps {
        let states = std::iter::once(("x".to_string(), &st.x)).chain(st.observed.iter().enumerate().map(|(i, y)| (format!("successor {}", i + 1), y)));
        for (state, v) in states {
            if v.len() != s.dim() {
                return Err(LearnError::Dimension { expected: s.dim(), got: v.len() });
            }
            let viol = s.max_violation(&DVector::from_column_slice(v))?;
            rep.states += 1;
            rep.worst_violation = rep.worst_violation.max(viol);
            if viol > tol {
                rep.violations.push(AuditViolation { k: st.k, state, violation: viol });
            }
        }
    }
    Ok(rep)
}

/// A failed run with everything logged before the failure.
#[derive(Debug)]
pub struct RunFailure {
    pub log: RunLog,
    pub error: LearnError,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for RunFailure {}

fn learned_outcome(out: &LearnOutcome) -> Outcome {
    match &out.result {
        LearnResult::Learned(a) => Outcome::Learned { matrix: matrix_rows(a) },
        LearnResult::Impossible(reason) => Outcome::Impossible { reason: reason.clone() },
    }
}

fn measurements(n: usize, steps: &[StepRecord]) -> Result<MeasurementSet, LearnError> {
    let mut d = MeasurementSet::new(n);
    for st in steps {
        let y = st.observed.first().ok_or_else(|| LearnError::Invalid(format!("step {} has no observation", st.k)))?;
        d.push(DVector::from_column_slice(&st.x), DVector::from_column_slice(y))?;
    }
    Ok(d)
}

/// One-step measurements `(xₖ, yₖ)` from logged steps.
pub fn measurements_from_steps(n: usize, steps: &[StepRecord]) -> Result<MeasurementSet, LearnError> {
    measurements(n, steps)
}

fn trajectories(n: usize, steps: &[StepRecord]) -> Result<TwoStepData, LearnError> {
    let mut d = TwoStepData::new(n);
    for st in steps {
        if st.observed.len() < 2 {
            return Err(LearnError::Invalid(format!("step {} lacks a second successor", st.k)));
        }
        let v = DVector::from_column_slice;
        d.push(v(&st.x), v(&st.observed[0]), v(&st.observed[1]))?;
    }
    Ok(d)
}

/// Two-step safe set after `data`: the SDP region, or the polyhedron
/// `{x | x, Ax, A²x ∈ S}` once the data pin down `A`.
fn twostep_region(s: &Polyhedron, u0: &EllipsoidalMatrixUncertainty, data: &TwoStepData, strict_tol: f64) -> Result<Box<dyn SupportOracle>, LearnError> {
    match build_twostep_sdp(s, u0, data, &DVector::zeros(s.dim()), strict_tol) {
        Ok(sdp) => {
            let coords = sdp.x.iter().map(|v| v.expr()).collect::<Vec<LinExpr>>();
            Ok(Box::new(ConicRegion::new(sdp.program, coords)))
        }
        Err(LearnError::StrictInterior(_)) => {
            let param = consistent_subspace(data)?;
            let a = if param.n_hat() == 0 {
                param.anchor.clone()
            } else {
                match check_strict_interior(&param.pullback(&u0.quadratic()), strict_tol)? {
                    StrictInterior::Fails { minimizer, .. } | StrictInterior::Point(minimizer) => param.eval(&minimizer),
                }
            };
            let n = s.dim();
            let h = s.h_matrix();
            let b = s.offsets();
            let a2 = &a * &a;
            let rows = DMatrix::from_fn(3 * h.nrows(), n, |i, j| {
                let r = i % h.nrows();
                match i / h.nrows() {
                    0 => h[(r, j)],
                    1 => (h.row(r) * &a)[j],
                    _ => (h.row(r) * &a2)[j],
                }
            });
            let rhs = DVector::from_fn(3 * b.len(), |i, _| b[i % b.len()]);
            Ok(Box::new(LiftedPolyhedron::new(rows, DMatrix::zeros(rhs.len(), 0), rhs)?))
        }
        Err(e) => Err(e),
    }
}

/// Offline cost (upper bound on the cost of learning) and the lower bound
/// available with `A⋆` known, for the linear modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostBounds {
    pub offline: f64,
    pub lower: f64,
}

pub fn cost_bounds(exp: &Experiment, solver: &Solver) -> Result<CostBounds, LearnError> {
    let n = exp.config.n;
    let a_star = &exp.system.a_star;
    match exp.config.mode {
        Mode::Linear1 => Ok(CostBounds {
            offline: offline_cost_limit(&exp.safety, polytope(exp), &exp.cost, solver)?,
            lower: cost_lower_bound(&exp.safety, a_star, &exp.cost, n, solver)?,
        }),
        Mode::Linear2 => {
            let m = default_trajectories(n);
            Ok(CostBounds {
                offline: twostep_offline_cost(&exp.safety, ellipsoid(exp), &exp.cost, m, solver)?,
                lower: twostep_cost_lower_bound(&exp.safety, a_star, &exp.cost, m, solver)?,
            })
        }
        Mode::Nonlinear1 => Err(LearnError::Invalid("cost bounds are defined for the linear modes only".into())),
    }
}

fn metric(log: &mut RunLog, name: &str, value: Result<f64, LearnError>) {
    match value {
        Ok(v) => log.set_metric(name, v),
        Err(e) => info!("{name} unavailable: {e}"),
    }
}

/// Dispatches to the configured learner with the hidden system as oracle.
pub fn run(exp: &Experiment) -> Result<RunLog, RunFailure> {
    let mut log = RunLog::new(exp.config.to_toml());
    let solver = exp.solver();
    let res = match exp.config.mode {
        Mode::Linear1 => run_linear1(exp, &solver, &mut log),
        Mode::Linear2 => run_linear2(exp, &solver, &mut log),
        Mode::Nonlinear1 => run_nonlinear1(exp, &solver, &mut log),
    };
    if let Err(error) = res {
        if log.steps.is_empty() {
            log.steps = error.partial().to_vec();
        }
        return Err(RunFailure { log, error });
    }
    match audit(&log.steps, &exp.safety, exp.config.learner.safety_tol) {
        Ok(rep) => {
            log.set_metric("audit_worst_violation", rep.worst_violation.max(f64::MIN));
            if !rep.passed() {
                let v = &rep.violations[0];
                let error = LearnError::SafetyViolation {
                    k: v.k,
                    what: "logged state",
                    violation: v.violation,
                    partial: log.steps.clone(),
                };
                return Err(RunFailure { log, error });
            }
        }
        Err(error) => return Err(RunFailure { log, error }),
    }
    Ok(log)
}

fn polytope(exp: &Experiment) -> &MatrixPolytope {
    match &exp.prior {
        Prior::Polytope(p) => p,
        Prior::Ellipsoid(_) => unreachable!("validated by config resolution"),
    }
}

fn ellipsoid(exp: &Experiment) -> &EllipsoidalMatrixUncertainty {
    match &exp.prior {
        Prior::Ellipsoid(e) => e,
        Prior::Polytope(_) => unreachable!("validated by config resolution"),
    }
}

fn run_linear1(exp: &Experiment, solver: &Solver, log: &mut RunLog) -> Result<(), LearnError> {
    let cfg = &exp.config;
    let u0 = polytope(exp);
    let n = cfg.n;
    let opts = OnestepOptions {
        epsilon: cfg.learner.epsilon,
        safety_tol: cfg.learner.safety_tol,
        ..Default::default()
    };
    let sys = &exp.system;
    let mut oracle = |x: &DVector<f64>| sys.step(x);
    let out = if cfg.learner.offline {
        learn_offline(&exp.safety, u0, &exp.cost, opts, &mut oracle, solver)?
    } else {
        learn_online(&exp.safety, u0, &exp.cost, opts, &mut oracle, solver)?
    };
    log.steps = out.steps.clone();
    log.outcome = Some(learned_outcome(&out));
    log.set_metric("online_cost", out.total_cost());
    let snap = &cfg.snapshot;
    for k in 0..=log.steps.len() {
        let data = measurements(n, &log.steps[..k])?;
        if snap.regions {
            let (region, _) = onestep_region(&exp.safety, u0, &data)?;
            let dims = (snap.dims[0], snap.dims[1]);
            log.regions.push(Snapshot {
                k,
                polygon: project2d(&region, dims, snap.directions, solver)?,
            });
        }
        if snap.uncertainty {
            let set = uncertainty_set(u0, &data);
            log.uncertainty.push(Snapshot {
                k,
                polygon: uncertainty_snapshot(&set, snap.directions, solver)?,
            });
        }
    }
    if cfg.learner.bounds {
        metric(log, "offline_upper_bound", offline_cost_limit(&exp.safety, u0, &exp.cost, solver));
        metric(log, "lower_bound", cost_lower_bound(&exp.safety, &sys.a_star, &exp.cost, n, solver));
    }
    Ok(())
}

fn run_linear2(exp: &Experiment, solver: &Solver, log: &mut RunLog) -> Result<(), LearnError> {
    let cfg = &exp.config;
    let u0 = ellipsoid(exp);
    let n = cfg.n;
    let opts = TwostepOptions {
        strict_tol: cfg.learner.strict_tol,
        budget: cfg.learner.budget,
        safety_tol: cfg.learner.safety_tol,
    };
    let sys = &exp.system;
    let mut oracle = |x: &DVector<f64>| {
        let o = sys.observe(x, 2);
        (o[0].clone(), o[1].clone())
    };
    let out = learn_two_step(&exp.safety, u0, &exp.cost, opts, &mut oracle, solver)?;
    log.steps = out.steps.clone();
    log.outcome = Some(learned_outcome(&out));
    log.set_metric("online_cost", out.total_cost());
    let snap = &cfg.snapshot;
    for k in 0..=log.steps.len() {
        let data = trajectories(n, &log.steps[..k])?;
        if snap.regions {
            let region = twostep_region(&exp.safety, u0, &data, cfg.learner.strict_tol)?;
            let dims = (snap.dims[0], snap.dims[1]);
            log.regions.push(Snapshot {
                k,
                polygon: project2d(region.as_ref(), dims, snap.directions, solver)?,
            });
        }
        if snap.uncertainty {
            let img = EllipsoidImage::new(u0, &data, &feature_map(n))?;
            log.uncertainty.push(Snapshot {
                k,
                polygon: project2d(&img, (0, 1), snap.directions, solver)?,
            });
        }
    }
    if cfg.learner.bounds {
        let m = default_trajectories(n);
        metric(log, "offline_upper_bound", twostep_offline_cost(&exp.safety, u0, &exp.cost, m, solver));
        metric(log, "lower_bound", twostep_cost_lower_bound(&exp.safety, &sys.a_star, &exp.cost, m, solver));
    }
    Ok(())
}

fn run_nonlinear1(exp: &Experiment, solver: &Solver, log: &mut RunLog) -> Result<(), LearnError> {
    let cfg = &exp.config;
    let u = exp.nonlinear.as_ref().expect("validated by config resolution");
    let n = cfg.n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.learner.seed);
    let mut sampler = |_k: usize| sphere_direction(&mut rng, n);
    let sys = &exp.system;
    let mut oracle = |x: &DVector<f64>| sys.step(x);
    let snap = &cfg.snapshot;
    let opts = ExploreOptions {
        max_resamples: cfg.learner.max_resamples,
        safety_tol: cfg.learner.safety_tol,
        snapshot: snap.regions.then_some(ExploreSnapshot {
            dims: (snap.dims[0], snap.dims[1]),
            directions: snap.directions,
        }),
        ..Default::default()
    };
    let out = safe_explore(&exp.safety, u, &mut sampler, cfg.learner.steps, &mut oracle, opts, solver)?;
    log.steps = out.steps;
    log.regions = out.regions;
    if snap.uncertainty {
        for k in 0..=log.steps.len() {
            let set = nonlinear_matrix_set(u, &measurements(n, &log.steps[..k])?);
            log.uncertainty.push(Snapshot {
                k,
                polygon: uncertainty_snapshot(&set, snap.directions, solver)?,
            });
        }
    }
    log.outcome = Some(Outcome::Completed {
        detail: format!("{} one-step safe measurements", log.steps.len()),
    });
    Ok(())
}

/// Both fitted models and their test error.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub least_squares: QuadraticVectorModel,
    pub sos: SosFit,
    pub rmse_least_squares: f64,
    pub rmse_sos: f64,
    pub train: usize,
    pub test: usize,
}

/// Fits on the first `fit.train` measurements and scores both models on
/// `fit.test` uniform points of `S`.
pub fn fit_report(exp: &Experiment, data: &MeasurementSet, solver: &Solver) -> Result<FitReport, LearnError> {
    let u = exp
        .nonlinear
        .as_ref()
        .ok_or_else(|| LearnError::Invalid("fitting needs a nonlinear1 config".into()))?;
    let spec = &exp.config.fit;
    let mut train = MeasurementSet::new(data.dim());
    for (x, y) in data.pairs().iter().take(spec.train) {
        train.push(x.clone(), y.clone())?;
    }
    let least_squares = fit_least_squares(&train)?;
    let sos = fit_sos_constrained(&train, &exp.safety, u, solver)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = sample_in(&exp.safety, spec.test, &mut rng, solver)?;
    let sys = &exp.system;
    let mut oracle = |x: &DVector<f64>| sys.step(x);
    let rmse_least_squares = rmse(&least_squares, &mut oracle, &points)?;
    let rmse_sos = rmse(&sos.model, &mut oracle, &points)?;
    Ok(FitReport {
        least_squares,
        sos,
        rmse_least_squares,
        rmse_sos,
        train: train.len(),
        test: points.len(),
    })
}
