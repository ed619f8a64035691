//! One-step safe learning of linear dynamics `x ↦ A⋆x` with a polyhedral
//! prior on `A⋆`.
//!
//! Matrices are flattened row-major: entry `(a, b)` of an `n×n` matrix sits at
//! index `a·n + b`.

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{ConicProgram, LinExpr, Solver, Status};
use crate::error::LearnError;
use crate::geometry::{
    bounding_box, box_width, independent_of, span_basis, BasisOptions, BasisSet, GeometryError, LiftedPolyhedron,
    Polyhedron, SupportOracle, DEFAULT_SINGLETON_TOL,
};
use crate::harness::{QueryChoice, StepRecord};

pub const DEFAULT_EPSILON: f64 = 0.01;
/// Condition number of the measurement matrix above which a warning is logged.
pub const CONDITION_WARN: f64 = 1e8;

/// `{A | Tr(Vⱼᵀ A) ≤ vⱼ}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixPolytope {
    n: usize,
    constraints: Vec<(DMatrix<f64>, f64)>,
}

impl MatrixPolytope {
    pub fn new(n: usize, constraints: Vec<(DMatrix<f64>, f64)>) -> Result<Self, LearnError> {
        for (v, _) in &constraints {
            if v.shape() != (n, n) {
                return Err(LearnError::Invalid(format!(
                    "constraint matrix is {}x{}, expected {n}x{n}",
                    v.nrows(),
                    v.ncols()
                )));
            }
        }
        Ok(Self { n, constraints })
    }

    /// `lo ≤ A ≤ hi` entrywise; infinite bounds are dropped.
    pub fn entrywise(lo: &DMatrix<f64>, hi: &DMatrix<f64>) -> Result<Self, LearnError> {
        let n = lo.nrows();
        if lo.shape() != (n, n) || hi.shape() != (n, n) {
            return Err(LearnError::Invalid("entry bounds must be square and of equal size".into()));
        }
        let mut cons = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if hi[(a, b)].is_finite() {
                    let mut v = DMatrix::zeros(n, n);
                    v[(a, b)] = 1.0;
                    cons.push((v, hi[(a, b)]));
                }
                if lo[(a, b)].is_finite() {
                    let mut v = DMatrix::zeros(n, n);
                    v[(a, b)] = -1.0;
                    cons.push((v, -lo[(a, b)]));
                }
            }
        }
        Self::new(n, cons)
    }

    /// `|Aᵢⱼ| ≤ bound`
    pub fn entrywise_box(n: usize, bound: f64) -> Self {
        let hi = DMatrix::from_element(n, n, bound);
        Self::entrywise(&(-&hi), &hi).expect("square bounds")
    }

    pub fn singleton(a: &DMatrix<f64>) -> Result<Self, LearnError> {
        Self::entrywise(a, a)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn constraints(&self) -> &[(DMatrix<f64>, f64)] {
        &self.constraints
    }

    pub fn contains(&self, a: &DMatrix<f64>, tol: f64) -> bool {
        self.constraints.iter().all(|(v, b)| v.dot(a) <= b + tol)
    }
}

/// Observed pairs `(xₖ, yₖ = A⋆xₖ)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    n: usize,
    pairs: Vec<(DVector<f64>, DVector<f64>)>,
}

impl MeasurementSet {
    pub fn new(n: usize) -> Self {
        Self { n, pairs: Vec::new() }
    }

    pub fn push(&mut self, x: DVector<f64>, y: DVector<f64>) -> Result<(), LearnError> {
        for v in [&x, &y] {
            if v.len() != self.n {
                return Err(LearnError::Dimension {
                    expected: self.n,
                    got: v.len(),
                });
            }
        }
        self.pairs.push((x, y));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(DVector<f64>, DVector<f64>)] {
        &self.pairs
    }

    /// Queries as columns.
    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.len(), |i, k| self.pairs[k].0[i])
    }

    pub fn y_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.len(), |i, k| self.pairs[k].1[i])
    }
}

fn check_problem(s: &Polyhedron, u0: &MatrixPolytope, data: &MeasurementSet) -> Result<(), LearnError> {
    let n = s.dim();
    for got in [u0.dim(), data.dim()] {
        if got != n {
            return Err(LearnError::Dimension { expected: n, got });
        }
    }
    Ok(())
}

/// `U_k = {A ∈ U₀ | A xⱼ = yⱼ}` over `vec(A) ∈ ℝ^{n²}`.
pub fn uncertainty_set(u0: &MatrixPolytope, data: &MeasurementSet) -> LiftedPolyhedron {
    let n = u0.dim();
    let s = u0.constraints().len();
    let a = DMatrix::from_fn(s, n * n, |j, idx| u0.constraints[j].0[(idx / n, idx % n)]);
    let c = DVector::from_iterator(s, u0.constraints.iter().map(|(_, v)| *v));
    let basis = measurement_basis(data);
    let m = basis.pairs.len();
    let rows = (m + basis.defects.len()) * n;
    // A qₖ = ỹₖ row by row; a defect row reads 0 = (Yv)ₗ
    let a_eq = DMatrix::from_fn(rows, n * n, |row, idx| {
        let (k, a) = (row / n, row % n);
        let (ra, b) = (idx / n, idx % n);
        if k < m && ra == a {
            basis.pairs[k].0[b]
        } else {
            0.0
        }
    });
    let c_eq = DVector::from_fn(rows, |row, _| {
        let (k, l) = (row / n, row % n);
        if k < m {
            basis.pairs[k].1[l]
        } else {
            basis.defects[k - m][l]
        }
    });
    LiftedPolyhedron::new(a, DMatrix::zeros(s, 0), c)
        .expect("consistent shapes")
        .with_equalities(a_eq, DMatrix::zeros(rows, 0), c_eq)
        .expect("consistent shapes")
}

/// Index of the dual variables in the lifted part of the one-step region:
/// per facet `i`, first `μ⁽ⁱ⁾ ∈ ℝˢ`, then `η₁⁽ⁱ⁾, …, η_m⁽ⁱ⁾ ∈ ℝⁿ`, one `η` per
/// direction of [`measurement_basis`].
#[derive(Clone, Copy, Debug)]
pub struct OnestepLayout {
    pub n: usize,
    pub facets: usize,
    pub s: usize,
    pub m: usize,
}

impl OnestepLayout {
    fn block(&self) -> usize {
        self.s + self.m * self.n
    }

    pub fn mu(&self, i: usize, j: usize) -> usize {
        i * self.block() + j
    }

    pub fn eta(&self, i: usize, k: usize, b: usize) -> usize {
        i * self.block() + self.s + k * self.n + b
    }

    pub fn lifted_dim(&self) -> usize {
        self.facets * self.block()
    }
}

/// The measurements re-expressed on an orthonormal basis of the measured
/// inputs: `A qⱼ = ỹⱼ` for every `A` that reproduces the data, and each
/// `defect` must vanish for the data to be consistent at all.
#[derive(Clone, Debug, Default)]
pub struct MeasurementBasis {
    pub pairs: Vec<(DVector<f64>, DVector<f64>)>,
    /// `Yv` for unit `v` with `Xv = 0`.
    pub defects: Vec<DVector<f64>>,
}

/// Nearly parallel queries make the raw pairs badly conditioned as
/// constraint rows; this basis carries the same information.
pub fn measurement_basis(data: &MeasurementSet) -> MeasurementBasis {
    if data.is_empty() {
        return MeasurementBasis::default();
    }
    let n = data.dim();
    let m = data.len();
    // pad with zero rows so that the SVD returns all of V
    let x = DMatrix::from_fn(n.max(m), m, |r, k| if r < n { data.pairs[k].0[r] } else { 0.0 });
    let y = DMatrix::from_fn(n, m, |r, k| data.pairs[k].1[r]);
    let svd = x.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let smax = svd.singular_values.max();
    let mut out = MeasurementBasis::default();
    for i in 0..m {
        let sigma = svd.singular_values[i];
        let yv = &y * v_t.row(i).transpose();
        if sigma > 1e-10 * smax {
            out.pairs.push((u.column(i).rows(0, n).into_owned(), yv / sigma));
        } else {
            out.defects.push(yv);
        }
    }
    out
}

/// The one-step safe set `S¹_k` as a lifted polyhedron over `(x, μ, η)`.
pub fn onestep_region(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    data: &MeasurementSet,
) -> Result<(LiftedPolyhedron, OnestepLayout), LearnError> {
    check_problem(s, u0, data)?;
    let n = s.dim();
    let basis = measurement_basis(data).pairs;
    let lay = OnestepLayout {
        n,
        facets: s.len(),
        s: u0.constraints().len(),
        m: basis.len(),
    };
    let r = lay.facets;
    let p = lay.lifted_dim();
    let rows = 2 * r + r * lay.s;
    let mut a = DMatrix::zeros(rows, n);
    let mut b = DMatrix::zeros(rows, p);
    let mut c = DVector::zeros(rows);
    for (i, h) in s.halfspaces().iter().enumerate() {
        // hᵢᵀx ≤ bᵢ
        a.row_mut(i).copy_from(&h.normal.transpose());
        c[i] = h.offset;
        // Σ yₖᵀηₖ + Σ μⱼvⱼ ≤ bᵢ
        let row = r + i;
        for (j, (_, v)) in u0.constraints().iter().enumerate() {
            b[(row, lay.mu(i, j))] = *v;
        }
        for (k, (_, y)) in basis.iter().enumerate() {
            for l in 0..n {
                b[(row, lay.eta(i, k, l))] = y[l];
            }
        }
        c[row] = h.offset;
        // μ ≥ 0
        for j in 0..lay.s {
            b[(2 * r + i * lay.s + j, lay.mu(i, j))] = -1.0;
        }
    }
    // x hᵢᵀ = Σ xₖηₖᵀ + Σ μⱼVⱼᵀ, entry (a, b) per facet
    let mut a_eq = DMatrix::zeros(r * n * n, n);
    let mut b_eq = DMatrix::zeros(r * n * n, p);
    for (i, h) in s.halfspaces().iter().enumerate() {
        for ra in 0..n {
            for cb in 0..n {
                let row = i * n * n + ra * n + cb;
                a_eq[(row, ra)] = h.normal[cb];
                for (k, (xk, _)) in basis.iter().enumerate() {
                    b_eq[(row, lay.eta(i, k, cb))] = -xk[ra];
                }
                for (j, (vj, _)) in u0.constraints().iter().enumerate() {
                    b_eq[(row, lay.mu(i, j))] = -vj[(cb, ra)];
                }
            }
        }
    }
    let region = LiftedPolyhedron::new(a, b, c)?.with_equalities(a_eq, b_eq, DVector::zeros(r * n * n))?;
    Ok((region, lay))
}

/// The LP minimizing `cᵀx` over the one-step region.
pub struct OnestepLp {
    pub program: ConicProgram,
    pub x: Vec<LinExpr>,
    pub layout: OnestepLayout,
}

pub fn build_onestep_lp(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    data: &MeasurementSet,
    c: &DVector<f64>,
) -> Result<OnestepLp, LearnError> {
    if c.len() != s.dim() {
        return Err(LearnError::Dimension {
            expected: s.dim(),
            got: c.len(),
        });
    }
    let (region, layout) = onestep_region(s, u0, data)?;
    let r = region.to_region();
    let mut program = r.program;
    program.minimize(LinExpr::dot(c.as_slice(), &r.coords));
    Ok(OnestepLp {
        program,
        x: r.coords,
        layout,
    })
}

/// Cheapest one-step safe query; `Infeasible` when none exists.
pub fn min_cost_safe_point(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    data: &MeasurementSet,
    c: &DVector<f64>,
    solver: &Solver,
) -> Result<(DVector<f64>, f64), LearnError> {
    let lp = build_onestep_lp(s, u0, data, c)?;
    let sol = solver.solve(&lp.program)?;
    match sol.status {
        Status::Infeasible => Err(LearnError::Infeasible("no one-step safe query exists".into())),
        Status::Unbounded => Err(LearnError::Infeasible("one-step safe cost is unbounded below".into())),
        _ => {
            let sol = sol.into_optimal()?;
            let x = DVector::from_iterator(lp.x.len(), lp.x.iter().map(|e| sol.value(e)));
            Ok((x, sol.objective_value))
        }
    }
}

/// `max {hᵀA x | A ∈ U_k}` evaluated through its dual LP; `+∞` when the
/// dual is infeasible (unbounded inner maximum).
pub fn worst_case_value(
    h: &DVector<f64>,
    u0: &MatrixPolytope,
    data: &MeasurementSet,
    x: &DVector<f64>,
    solver: &Solver,
) -> Result<f64, LearnError> {
    let n = u0.dim();
    let mut p = ConicProgram::new();
    let mu = p.add_vector("mu", u0.constraints().len());
    let eta: Vec<_> = (0..data.len()).map(|_| p.add_vector("eta", n)).collect();
    for m in &mu {
        p.nonneg(m.expr());
    }
    for a in 0..n {
        for b in 0..n {
            let mut e = LinExpr::constant(-x[a] * h[b]);
            for (k, (xk, _)) in data.pairs().iter().enumerate() {
                e.add_term(eta[k][b], xk[a]);
            }
            for (j, (vj, _)) in u0.constraints().iter().enumerate() {
                e.add_term(mu[j], vj[(b, a)]);
            }
            p.eq(e);
        }
    }
    let mut obj = LinExpr::zero();
    for (j, (_, v)) in u0.constraints().iter().enumerate() {
        obj.add_term(mu[j], *v);
    }
    for (k, (_, yk)) in data.pairs().iter().enumerate() {
        for l in 0..n {
            obj.add_term(eta[k][l], yk[l]);
        }
    }
    p.minimize(obj);
    let sol = solver.solve(&p)?;
    match sol.status {
        Status::Infeasible => Ok(f64::INFINITY),
        Status::Unbounded => Ok(f64::NEG_INFINITY),
        _ => Ok(sol.into_optimal()?.objective_value),
    }
}

/// Polytopic norm unit ball used for disturbance bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum UnitBall {
    Infinity,
    One,
    /// Convex hull of the listed vertices (should be symmetric about 0).
    Vertices(Vec<DVector<f64>>),
}

impl UnitBall {
    pub fn support(&self, h: &DVector<f64>) -> f64 {
        match self {
            UnitBall::Infinity => h.lp_norm(1),
            UnitBall::One => h.amax(),
            UnitBall::Vertices(vs) => vs.iter().map(|v| h.dot(v)).fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Shrinks every facet offset by `W` times the ball's support along the
/// normal, so that `A x + w ∈ S` for all `‖w‖ ≤ W`.
pub fn disturbance_tighten(s: &Polyhedron, w: f64, ball: &UnitBall) -> Result<Polyhedron, LearnError> {
    if !(w >= 0.0) {
        return Err(LearnError::Invalid(format!("disturbance bound must be nonnegative, got {w}")));
    }
    let hs = s
        .halfspaces()
        .iter()
        .map(|h| {
            let mut h = h.clone();
            h.offset -= w * ball.support(&h.normal);
            h
        })
        .collect();
    Ok(Polyhedron::new(s.dim(), hs)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum LearnResult {
    Learned(DMatrix<f64>),
    Impossible(String),
}

#[derive(Clone, Debug)]
pub struct LearnOutcome {
    pub result: LearnResult,
    pub steps: Vec<StepRecord>,
    pub measurements_used: usize,
}

impl LearnOutcome {
    pub fn total_cost(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative_cost)
    }

    pub fn learned(&self) -> Option<&DMatrix<f64>> {
        match &self.result {
            LearnResult::Learned(a) => Some(a),
            LearnResult::Impossible(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnestepOptions {
    pub epsilon: f64,
    pub singleton_tol: f64,
    pub basis: BasisOptions,
    /// Slack allowed when auditing queries and observations against `S`.
    pub safety_tol: f64,
}

impl Default for OnestepOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            singleton_tol: DEFAULT_SINGLETON_TOL,
            basis: BasisOptions::default(),
            safety_tol: 1e-6,
        }
    }
}

impl OnestepOptions {
    fn check(&self) -> Result<(), LearnError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(LearnError::Invalid(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Oracle returning `A⋆x`.
pub type LinearOracle<'a> = dyn FnMut(&DVector<f64>) -> DVector<f64> + 'a;

/// `Y X⁻¹` from `n` independent measurements.
pub fn recover_matrix(data: &MeasurementSet) -> Result<DMatrix<f64>, LearnError> {
    let x = data.x_matrix();
    let sv = x.singular_values();
    let cond = sv.max() / sv.min();
    if cond > CONDITION_WARN {
        warn!("measurement matrix is ill conditioned (condition number {cond:.3e})");
    }
    let inv = x
        .try_inverse()
        .ok_or_else(|| LearnError::Invalid("measurement matrix is singular".into()))?;
    Ok(data.y_matrix() * inv)
}

fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, b| v[a * n + b])
}

struct Session<'a, 'o> {
    s: &'a Polyhedron,
    c: &'a DVector<f64>,
    opts: OnestepOptions,
    oracle: &'a mut LinearOracle<'o>,
    data: MeasurementSet,
    steps: Vec<StepRecord>,
}

impl Session<'_, '_> {
    fn fail(&self, k: usize, source: GeometryError) -> LearnError {
        LearnError::Step {
            k,
            source,
            partial: self.steps.clone(),
        }
    }

    fn query(&mut self, x: DVector<f64>, width: f64, choice: QueryChoice) -> Result<(), LearnError> {
        let k = self.steps.len() + 1;
        let n = self.s.dim();
        let y = (self.oracle)(&x);
        if y.len() != n {
            return Err(LearnError::Dimension { expected: n, got: y.len() });
        }
        for (what, v) in [("query", &x), ("observation", &y)] {
            let viol = self.s.max_violation(v)?;
            if viol > self.opts.safety_tol {
                return Err(LearnError::SafetyViolation {
                    k,
                    what,
                    violation: viol,
                    partial: self.steps.clone(),
                });
            }
        }
        let cost = self.c.dot(&x);
        let cum = self.steps.last().map_or(0.0, |s| s.cumulative_cost) + cost;
        debug!("step {k}: x = {:?}, cost {cost:.6}", x.as_slice());
        self.steps.push(StepRecord {
            k,
            x: x.as_slice().to_vec(),
            observed: vec![y.as_slice().to_vec()],
            step_cost: cost,
            cumulative_cost: cum,
            uncertainty_width: width,
            choice,
            cost_vector: self.c.as_slice().to_vec(),
        });
        self.data.push(x, y)
    }

    fn finish(self, result: LearnResult) -> LearnOutcome {
        LearnOutcome {
            result,
            measurements_used: self.data.len(),
            steps: self.steps,
        }
    }
}

/// Online one-step safe learning: each query is the cheapest point that is
/// safe under every matrix consistent with the data so far, blended towards
/// a new direction when it adds no information.
pub fn learn_online(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    c: &DVector<f64>,
    opts: OnestepOptions,
    oracle: &mut LinearOracle<'_>,
    solver: &Solver,
) -> Result<LearnOutcome, LearnError> {
    opts.check()?;
    let n = s.dim();
    check_problem(s, u0, &MeasurementSet::new(n))?;
    let mut ses = Session {
        s,
        c,
        opts,
        oracle,
        data: MeasurementSet::new(n),
        steps: Vec::new(),
    };
    let mut queries = BasisSet::new(opts.basis.rank_tol);

    for k in 0..n {
        let uk = uncertainty_set(u0, &ses.data);
        let Some((lo, hi)) = bounding_box(&uk, solver).map_err(|e| ses.fail(k, e))? else {
            return Err(LearnError::Inconsistent {
                k,
                partial: ses.steps,
            });
        };
        let width = box_width(&lo, &hi);
        if width <= opts.singleton_tol {
            info!("uncertainty set is a singleton after {k} measurements");
            return Ok(ses.finish(LearnResult::Learned(unvec(&((lo + hi) * 0.5), n))));
        }

        let (x_star, _) = match min_cost_safe_point(s, u0, &ses.data, c, solver) {
            Ok(v) => v,
            Err(LearnError::Infeasible(why)) => return Ok(ses.finish(LearnResult::Impossible(why))),
            Err(LearnError::Geometry(e)) => return Err(ses.fail(k, e)),
            Err(e) => return Err(e),
        };
        let (x, choice) = if independent_of(&x_star, &queries) {
            (x_star, QueryChoice::Optimal)
        } else {
            let (region, _) = onestep_region(s, u0, &ses.data)?;
            let basis = span_basis(&region, opts.basis, solver).map_err(|e| ses.fail(k, e))?;
            match basis.vectors().iter().position(|z| independent_of(z, &queries)) {
                Some(j) => {
                    let z = &basis.vectors()[j];
                    let x = &x_star * (1.0 - opts.epsilon) + z * opts.epsilon;
                    (x, QueryChoice::Blended { index: j })
                }
                None => {
                    let why = format!(
                        "the one-step safe region spans only {} dimension(s) after {k} measurement(s)",
                        basis.len()
                    );
                    return Ok(ses.finish(LearnResult::Impossible(why)));
                }
            }
        };
        if !queries.push(x.clone()) {
            return Err(LearnError::Invalid(
                "blended query is numerically dependent on earlier queries; increase epsilon".into(),
            ));
        }
        ses.query(x, width, choice)?;
    }
    let a = recover_matrix(&ses.data)?;
    Ok(ses.finish(LearnResult::Learned(a)))
}

/// Offline baseline: all `n` queries are planned from the initial safe
/// region, blending the cheapest point with each basis vector.
pub fn learn_offline(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    c: &DVector<f64>,
    opts: OnestepOptions,
    oracle: &mut LinearOracle<'_>,
    solver: &Solver,
) -> Result<LearnOutcome, LearnError> {
    opts.check()?;
    let n = s.dim();
    let empty = MeasurementSet::new(n);
    let (region, _) = onestep_region(s, u0, &empty)?;
    let mut ses = Session {
        s,
        c,
        opts,
        oracle,
        data: MeasurementSet::new(n),
        steps: Vec::new(),
    };
    let basis = span_basis(&region, opts.basis, solver).map_err(|e| ses.fail(0, e))?;
    if basis.len() < n {
        let why = format!("the initial safe region spans only {} of {n} dimensions", basis.len());
        return Ok(ses.finish(LearnResult::Impossible(why)));
    }
    let (x0, _) = min_cost_safe_point(s, u0, &empty, c, solver)?;
    for (j, z) in basis.vectors().iter().enumerate() {
        let x = &x0 * (1.0 - opts.epsilon) + z * opts.epsilon;
        ses.query(x, f64::NAN, QueryChoice::Planned { index: j })?;
    }
    let a = recover_matrix(&ses.data)?;
    Ok(ses.finish(LearnResult::Learned(a)))
}

/// `n · cᵀx₀*`, the offline cost as ε → 0.
pub fn offline_cost_limit(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    c: &DVector<f64>,
    solver: &Solver,
) -> Result<f64, LearnError> {
    let (_, v) = min_cost_safe_point(s, u0, &MeasurementSet::new(s.dim()), c, solver)?;
    Ok(s.dim() as f64 * v)
}

/// `m · min {cᵀx | x ∈ S, A⋆x ∈ S}`.
pub fn cost_lower_bound(
    s: &Polyhedron,
    a_star: &DMatrix<f64>,
    c: &DVector<f64>,
    measurements: usize,
    solver: &Solver,
) -> Result<f64, LearnError> {
    let (v, _) = safe_region_min(s, &[a_star.clone()], c, solver)?;
    Ok(measurements as f64 * v)
}

/// `min {cᵀx | x ∈ S, Mx ∈ S for every M in maps}` and its minimizer.
pub(crate) fn safe_region_min(
    s: &Polyhedron,
    maps: &[DMatrix<f64>],
    c: &DVector<f64>,
    solver: &Solver,
) -> Result<(f64, DVector<f64>), LearnError> {
    let n = s.dim();
    for m in maps {
        if m.shape() != (n, n) {
            return Err(LearnError::Dimension { expected: n, got: m.nrows() });
        }
    }
    if c.len() != n {
        return Err(LearnError::Dimension { expected: n, got: c.len() });
    }
    let mut p = ConicProgram::new();
    let x = p.add_vector("x", n);
    let xe: Vec<LinExpr> = x.iter().map(|v| v.expr()).collect();
    let id = DMatrix::identity(n, n);
    for m in std::iter::once(&id).chain(maps) {
        for h in s.halfspaces() {
            let row = m.transpose() * &h.normal;
            p.le(LinExpr::dot(row.as_slice(), &xe), h.offset.into());
        }
    }
    p.minimize(LinExpr::dot(c.as_slice(), &xe));
    let sol = solver.solve(&p)?;
    match sol.status {
        Status::Infeasible => Err(LearnError::Infeasible("the true safe region is empty".into())),
        Status::Unbounded => Err(LearnError::Infeasible("the cost is unbounded below on the true safe region".into())),
        _ => {
            let sol = sol.into_optimal()?;
            Ok((sol.objective_value, DVector::from_vec(sol.vars(&x))))
        }
    }
}

/// The one-step region as a support oracle over `x`.
pub fn region_oracle(
    s: &Polyhedron,
    u0: &MatrixPolytope,
    data: &MeasurementSet,
) -> Result<impl SupportOracle, LearnError> {
    Ok(onestep_region(s, u0, data)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn layout_indices_are_disjoint() {
        let lay = OnestepLayout { n: 2, facets: 3, s: 4, m: 2 };
        let mut seen = std::collections::HashSet::new();
        for i in 0..3 {
            for j in 0..4 {
                assert!(seen.insert(lay.mu(i, j)));
            }
            for k in 0..2 {
                for b in 0..2 {
                    assert!(seen.insert(lay.eta(i, k, b)));
                }
            }
        }
        assert_eq!(seen.len(), lay.lifted_dim());
    }

    #[test]
    fn tighten_examples() {
        let s = Polyhedron::unit_box(2);
        assert_eq!(disturbance_tighten(&s, 0.0, &UnitBall::Infinity).unwrap(), s);
        let t = disturbance_tighten(&s, 0.1, &UnitBall::Infinity).unwrap();
        assert!(t.offsets().iter().all(|b| (b - 0.9).abs() < 1e-15));
        let diag = Polyhedron::from_matrix(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &dv(&[1.0])).unwrap();
        let t = disturbance_tighten(&diag, 0.2, &UnitBall::One).unwrap();
        assert!((t.offsets()[0] - 0.8).abs() < 1e-15);
        assert!(disturbance_tighten(&s, -1.0, &UnitBall::One).is_err());
        let cross = UnitBall::Vertices(vec![dv(&[1.0, 0.0]), dv(&[-1.0, 0.0]), dv(&[0.0, 1.0]), dv(&[0.0, -1.0])]);
        assert_eq!(cross.support(&dv(&[1.0, 1.0])), UnitBall::One.support(&dv(&[1.0, 1.0])));
    }

    #[test]
    fn uncertainty_rows_encode_measurements() {
        let u0 = MatrixPolytope::entrywise_box(2, 1.0);
        let mut data = MeasurementSet::new(2);
        data.push(dv(&[1.0, 2.0]), dv(&[3.0, 4.0])).unwrap();
        let uk = uncertainty_set(&u0, &data);
        // A = [[1, 1], [0, 2]] satisfies A (1,2) = (3, 4)
        let a = dv(&[1.0, 1.0, 0.0, 2.0]);
        assert!((&uk.a_eq * &a - &uk.c_eq).amax() < 1e-15);
    }

    #[test]
    fn recover_matrix_inverts() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let mut data = MeasurementSet::new(2);
        for x in [dv(&[1.0, 0.3]), dv(&[-0.2, 0.7])] {
            let y = &a * &x;
            data.push(x, y).unwrap();
        }
        assert!((recover_matrix(&data).unwrap() - a).norm() < 1e-12);
    }
}
