//! One-step safe exploration of `x⁺ = A⋆x + g⋆(x)` with polytopic
//! uncertainty on `A⋆` and `‖g⋆(x)‖_∞ ≤ γ‖x‖_p^d` on `S`, plus quadratic model
//! fitting with and without sum-of-squares bounds on the nonlinear part.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conic::{pnorm_power_epigraph, ConicProgram, LinExpr, PNorm, PsdBlock, Solution, Solver, Status, SymVar, Var};
use crate::error::LearnError;
use crate::geometry::{project2d, ConicRegion, Polyhedron};
use crate::harness::{QueryChoice, Snapshot, StepRecord};
use crate::linear_onestep::{MatrixPolytope, MeasurementSet};

/// Prior knowledge `(U₀,A, γ, p, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearUncertainty {
    pub a: MatrixPolytope,
    pub gamma: f64,
    pub p: PNorm,
    pub d: u32,
}

impl NonlinearUncertainty {
    pub fn new(a: MatrixPolytope, gamma: f64, p: PNorm, d: u32) -> Result<Self, LearnError> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(LearnError::Invalid(format!("γ must be finite and nonnegative, got {gamma}")));
        }
        Ok(Self { a, gamma, p, d })
    }

    /// `d = 0`: `‖g(x)‖_∞ ≤ γ` on `S`.
    pub fn bounded(a: MatrixPolytope, gamma: f64) -> Result<Self, LearnError> {
        Self::new(a, gamma, PNorm::Infinity, 0)
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// `γ‖x‖_p^d`
    pub fn g_bound(&self, x: &[f64]) -> f64 {
        self.gamma * self.p.norm_power(x, self.d)
    }
}

/// The SOCP with handles to its dual-certificate variables.
pub struct NonlinearSocp {
    pub program: ConicProgram,
    pub x: Vec<Var>,
    /// `μ[i][j]` for facet `i`, prior constraint `j`.
    pub mu: Vec<Vec<Var>>,
    /// `η±[i][k][l]` for facet `i`, measurement `k`, coordinate `l`.
    pub eta_plus: Vec<Vec<Vec<Var>>>,
    pub eta_minus: Vec<Vec<Vec<Var>>>,
    /// Epigraph of `‖x‖_p^d`; absent when `γ = 0`.
    pub t: Option<Var>,
}

fn check_problem(s: &Polyhedron, u: &NonlinearUncertainty, data: &MeasurementSet) -> Result<(), LearnError> {
    let n = s.dim();
    for got in [u.dim(), data.dim()] {
        if got != n {
            return Err(LearnError::Dimension { expected: n, got });
        }
    }
    Ok(())
}

/// Constraints of the SOCP without an objective.
pub fn nonlinear_constraints(s: &Polyhedron, u: &NonlinearUncertainty, data: &MeasurementSet) -> Result<NonlinearSocp, LearnError> {
    check_problem(s, u, data)?;
    let n = s.dim();
    let mut p = ConicProgram::new();
    let x = p.add_vector("x", n);
    let xe: Vec<LinExpr> = x.iter().map(|v| v.expr()).collect();
    let t = if u.gamma > 0.0 {
        Some(pnorm_power_epigraph(&mut p, &xe, u.p, u.d)?.0)
    } else {
        None
    };
    let slack: Vec<f64> = data.pairs().iter().map(|(xk, _)| u.g_bound(xk.as_slice())).collect();
    let (mut mu, mut eta_plus, mut eta_minus) = (Vec::new(), Vec::new(), Vec::new());
    for hs in s.halfspaces() {
        let h = &hs.normal;
        p.le(LinExpr::dot(h.as_slice(), &xe), hs.offset.into());
        let m = p.add_vector("mu", u.a.constraints().len());
        let ep: Vec<Vec<Var>> = (0..data.len()).map(|_| p.add_vector("eta_plus", n)).collect();
        let em: Vec<Vec<Var>> = (0..data.len()).map(|_| p.add_vector("eta_minus", n)).collect();
        for v in m.iter().chain(ep.iter().flatten()).chain(em.iter().flatten()) {
            p.nonneg(v.expr());
        }
        // worst-case value of hᵢᵀ(Ax + g(x))
        let mut worst = LinExpr::zero();
        for (mj, (_, vj)) in m.iter().zip(u.a.constraints()) {
            worst.add_term(*mj, *vj);
        }
        for (k, (_, yk)) in data.pairs().iter().enumerate() {
            for l in 0..n {
                worst.add_term(ep[k][l], slack[k] + yk[l]);
                worst.add_term(em[k][l], slack[k] - yk[l]);
            }
        }
        if let Some(t) = t {
            worst.add_term(t, u.gamma * h.lp_norm(1));
        }
        p.le(worst, hs.offset.into());
        // x hᵢᵀ = Σ μⱼVⱼᵀ + Σ (η⁺ₖₗ − η⁻ₖₗ) xₖeₗᵀ
        for ra in 0..n {
            for cb in 0..n {
                let mut e = LinExpr::term(x[ra], h[cb]);
                for (mj, (vj, _)) in m.iter().zip(u.a.constraints()) {
                    e.add_term(*mj, -vj[(cb, ra)]);
                }
                for (k, (xk, _)) in data.pairs().iter().enumerate() {
                    e.add_term(ep[k][cb], -xk[ra]);
                    e.add_term(em[k][cb], xk[ra]);
                }
                p.eq(e);
            }
        }
        mu.push(m);
        eta_plus.push(ep);
        eta_minus.push(em);
    }
    Ok(NonlinearSocp {
        program: p,
        x,
        mu,
        eta_plus,
        eta_minus,
        t,
    })
}

pub fn build_nonlinear_socp(
    s: &Polyhedron,
    u: &NonlinearUncertainty,
    data: &MeasurementSet,
    c: &DVector<f64>,
) -> Result<NonlinearSocp, LearnError> {
    if c.len() != s.dim() {
        return Err(LearnError::Dimension {
            expected: s.dim(),
            got: c.len(),
        });
    }
    let mut socp = nonlinear_constraints(s, u, data)?;
    let xe: Vec<LinExpr> = socp.x.iter().map(|v| v.expr()).collect();
    socp.program.minimize(LinExpr::dot(c.as_slice(), &xe));
    Ok(socp)
}

impl NonlinearSocp {
    /// Upper bound on `hᵢᵀ(Ax + g(x))` read off the dual variables.
    pub fn worst_case_bound(&self, i: usize, s: &Polyhedron, u: &NonlinearUncertainty, data: &MeasurementSet, sol: &Solution) -> f64 {
        let x = sol.vars(&self.x);
        let mut v: f64 = self.mu[i].iter().zip(u.a.constraints()).map(|(m, (_, vj))| sol.var(*m) * vj).sum();
        for (k, (xk, yk)) in data.pairs().iter().enumerate() {
            let sk = u.g_bound(xk.as_slice());
            for l in 0..s.dim() {
                v += sol.var(self.eta_plus[i][k][l]) * (sk + yk[l]) + sol.var(self.eta_minus[i][k][l]) * (sk - yk[l]);
            }
        }
        v + u.gamma * s.halfspaces()[i].normal.lp_norm(1) * u.p.norm_power(&x, u.d)
    }
}

/// The SOCP feasible set `F` projected onto `x`.
pub fn nonlinear_region(s: &Polyhedron, u: &NonlinearUncertainty, data: &MeasurementSet) -> Result<ConicRegion, LearnError> {
    let socp = nonlinear_constraints(s, u, data)?;
    let coords = socp.x.iter().map(|v| v.expr()).collect();
    Ok(ConicRegion::new(socp.program, coords))
}

/// Where the cheapest safe point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    Fresh,
    /// Re-measuring `x_index` (zero-based), which is safe by construction.
    Remeasure { index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NonlinearQuery {
    pub x: DVector<f64>,
    pub value: f64,
    pub source: QuerySource,
}

/// Minimizes `cᵀx` over `F ∪ {x₁, …, x_k}`.
pub fn min_cost_nonlinear(
    s: &Polyhedron,
    u: &NonlinearUncertainty,
    data: &MeasurementSet,
    c: &DVector<f64>,
    solver: &Solver,
) -> Result<NonlinearQuery, LearnError> {
    let fresh = solve_fresh(s, u, data, c, solver)?;
    let measured = data
        .pairs()
        .iter()
        .enumerate()
        .map(|(k, (xk, _))| (k, c.dot(xk)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match (fresh, measured) {
        (Some(q), Some((k, v))) if v < q.value => Ok(NonlinearQuery {
            x: data.pairs()[k].0.clone(),
            value: v,
            source: QuerySource::Remeasure { index: k },
        }),
        (Some(q), _) => Ok(q),
        (None, Some((k, v))) => Ok(NonlinearQuery {
            x: data.pairs()[k].0.clone(),
            value: v,
            source: QuerySource::Remeasure { index: k },
        }),
        (None, None) => Err(LearnError::Infeasible("no one-step safe query exists".into())),
    }
}

/// Optimum over `F` alone; `None` when `F` is empty.
fn solve_fresh(
    s: &Polyhedron,
    u: &NonlinearUncertainty,
    data: &MeasurementSet,
    c: &DVector<f64>,
    solver: &Solver,
) -> Result<Option<NonlinearQuery>, LearnError> {
    let socp = build_nonlinear_socp(s, u, data, c)?;
    let sol = solver.solve(&socp.program)?;
    match sol.status {
        Status::Infeasible => Ok(None),
        Status::Unbounded => Err(LearnError::Infeasible("one-step safe cost is unbounded below".into())),
        _ => {
            let sol = sol.into_optimal()?;
            Ok(Some(NonlinearQuery {
                x: DVector::from_vec(sol.vars(&socp.x)),
                value: sol.objective_value,
                source: QuerySource::Fresh,
            }))
        }
    }
}

/// Uniform direction on the unit sphere.
pub fn sphere_direction(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Region snapshots taken during exploration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSpec {
    pub dims: (usize, usize),
    pub directions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExploreOptions {
    pub max_resamples: usize,
    pub safety_tol: f64,
    /// Queries closer than this to a measured point count as repeats.
    pub repeat_tol: f64,
    pub snapshot: Option<SnapshotSpec>,
}

impl Default for ExploreOptions {
    fn default() -> Self {
        Self {
            max_resamples: 20,
            safety_tol: 1e-6,
            repeat_tol: 1e-7,
            snapshot: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExploreOutcome {
    pub data: MeasurementSet,
    pub steps: Vec<StepRecord>,
    /// Cost direction used at each step.
    pub directions: Vec<DVector<f64>>,
    /// `F_k` for `k = 0..=steps`, when requested.
    pub regions: Vec<Snapshot>,
}

/// Oracle for the true map `f⋆`.
pub type SystemOracle<'a> = dyn FnMut(&DVector<f64>) -> DVector<f64> + 'a;

/// Queries `steps` one-step safe points, each minimizing a freshly sampled
/// cost. A direction is redrawn when `F` is empty or its optimum repeats a
/// measured point.
pub fn safe_explore(
    s: &Polyhedron,
    u: &NonlinearUncertainty,
    sampler: &mut dyn FnMut(usize) -> DVector<f64>,
    steps: usize,
    oracle: &mut SystemOracle<'_>,
    opts: ExploreOptions,
    solver: &Solver,
) -> Result<ExploreOutcome, LearnError> {
    if steps == 0 {
        return Err(LearnError::Invalid("exploration needs at least one step".into()));
    }
    let n = s.dim();
    let mut out = ExploreOutcome {
        data: MeasurementSet::new(n),
        steps: Vec::new(),
        directions: Vec::new(),
        regions: Vec::new(),
    };
    check_problem(s, u, &out.data)?;
    let snap = |data: &MeasurementSet, k: usize, regions: &mut Vec<Snapshot>| -> Result<(), LearnError> {
        if let Some(spec) = opts.snapshot {
            let region = nonlinear_region(s, u, data)?;
            let polygon = project2d(&region, spec.dims, spec.directions, solver)?;
            regions.push(Snapshot { k, polygon });
        }
        Ok(())
    };
    snap(&out.data, 0, &mut out.regions)?;

    for k in 1..=steps {
        let mut resamples = 0;
        let (c, q) = loop {
            let c = sampler(k);
            if c.len() != n {
                return Err(LearnError::Dimension { expected: n, got: c.len() });
            }
            let fresh = solve_fresh(s, u, &out.data, &c, solver).map_err(|e| attach(e, k, &out.steps))?;
            match fresh {
                Some(q) if !out.data.pairs().iter().any(|(xk, _)| (xk - &q.x).amax() <= opts.repeat_tol) => break (c, q),
                Some(_) => debug!("step {k}: optimum repeats a measured point, resampling"),
                None => debug!("step {k}: empty safe set for this direction, resampling"),
            }
            resamples += 1;
            if resamples > opts.max_resamples {
                warn!("step {k}: no informative query after {resamples} draws");
                return Err(LearnError::Infeasible(format!(
                    "step {k}: no new one-step safe query after {resamples} cost directions"
                )));
            }
        };
        let y = oracle(&q.x);
        if y.len() != n {
            return Err(LearnError::Dimension { expected: n, got: y.len() });
        }
        for (what, v) in [("query", &q.x), ("successor", &y)] {
            let viol = s.max_violation(v)?;
            if viol > opts.safety_tol {
                return Err(LearnError::SafetyViolation {
                    k,
                    what,
                    violation: viol,
                    partial: out.steps,
                });
            }
        }
        let cost = c.dot(&q.x);
        out.steps.push(StepRecord {
            k,
            x: q.x.as_slice().to_vec(),
            observed: vec![y.as_slice().to_vec()],
            step_cost: cost,
            cumulative_cost: out.steps.last().map_or(0.0, |s| s.cumulative_cost) + cost,
            uncertainty_width: f64::NAN,
            choice: QueryChoice::Explore { resamples },
            cost_vector: c.as_slice().to_vec(),
        });
        out.directions.push(c);
        out.data.push(q.x, y)?;
        snap(&out.data, k, &mut out.regions).map_err(|e| attach(e, k, &out.steps))?;
    }
    Ok(out)
}

fn attach(e: LearnError, k: usize, steps: &[StepRecord]) -> LearnError {
    match e {
        LearnError::Geometry(source) => LearnError::Step {
            k,
            source,
            partial: steps.to_vec(),
        },
        e => e,
    }
}

/// `f̂(x) = Âx + (xᵀG₁x, …, xᵀGₙx)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticVectorModel {
    pub a: DMatrix<f64>,
    /// Symmetric.
    pub g: Vec<DMatrix<f64>>,
}

const MODEL_HEADER: &str = "quadratic-vector-model 1";

impl QuadraticVectorModel {
    pub fn new(a: DMatrix<f64>, g: Vec<DMatrix<f64>>) -> Result<Self, LearnError> {
        let n = a.nrows();
        if a.ncols() != n || g.len() != n || g.iter().any(|m| m.shape() != (n, n)) {
            return Err(LearnError::Invalid("model blocks must all be n×n with n quadratic parts".into()));
        }
        for m in &g {
            if (m - m.transpose()).amax() > 1e-12 * (1.0 + m.amax()) {
                return Err(LearnError::Invalid("quadratic coefficient matrices must be symmetric".into()));
            }
        }
        Ok(Self { a, g })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn g_value(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.g.iter().map(|m| x.dot(&(m * x))))
    }

    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + self.g_value(x)
    }

    /// `Σ ‖f̂(xₖ) − yₖ‖²`
    pub fn loss(&self, data: &MeasurementSet) -> f64 {
        data.pairs().iter().map(|(x, y)| (self.eval(x) - y).norm_squared()).sum()
    }

    pub fn to_text(&self) -> String {
        let n = self.dim();
        let mut s = format!("{MODEL_HEADER}\nn {n}\n");
        let mut block = |name: &str, m: &DMatrix<f64>| {
            let _ = writeln!(s, "{name}");
            for r in 0..n {
                let row: Vec<String> = (0..n).map(|c| format!("{:e}", m[(r, c)])).collect();
                let _ = writeln!(s, "{}", row.join(" "));
            }
        };
        block("A", &self.a);
        for (j, m) in self.g.iter().enumerate() {
            block(&format!("G {}", j + 1), m);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, LearnError> {
        let bad = |what: &str| LearnError::Invalid(format!("model file: {what}"));
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        if lines.next() != Some(MODEL_HEADER) {
            return Err(bad(&format!("expected header {MODEL_HEADER:?}")));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("n "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("missing dimension line"))?;
        let mut read_block = |name: &str| -> Result<DMatrix<f64>, LearnError> {
            if lines.next() != Some(name) {
                return Err(bad(&format!("expected block {name:?}")));
            }
            let mut m = DMatrix::zeros(n, n);
            for r in 0..n {
                let line = lines.next().ok_or_else(|| bad(&format!("block {name:?} is short")))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(&format!("block {name:?}: {e}")))?;
                if vals.len() != n {
                    return Err(bad(&format!("block {name:?} row {} has {} entries", r + 1, vals.len())));
                }
                m.row_mut(r).copy_from_slice(&vals);
            }
            Ok(m)
        };
        let a = read_block("A")?;
        let g = (1..=n).map(|j| read_block(&format!("G {j}"))).collect::<Result<Vec<_>, _>>()?;
        if lines.next().is_some() {
            return Err(bad("trailing content"));
        }
        Self::new(a, g)
    }
}

/// Features `[x, xₐ², √2·xₐx_b (a < b)]`; a unit coefficient vector in this
/// basis has the Frobenius norm of `(Â row, G)`.
fn features(x: &DVector<f64>) -> Vec<f64> {
    let n = x.len();
    let mut f = x.as_slice().to_vec();
    for a in 0..n {
        for b in a..n {
            f.push(if a == b { x[a] * x[a] } else { std::f64::consts::SQRT_2 * x[a] * x[b] });
        }
    }
    f
}

fn model_from_coefficients(n: usize, theta: &DMatrix<f64>) -> QuadraticVectorModel {
    let mut a = DMatrix::zeros(n, n);
    let mut g = vec![DMatrix::zeros(n, n); n];
    for j in 0..n {
        for b in 0..n {
            a[(j, b)] = theta[(b, j)];
        }
        let mut idx = n;
        for p in 0..n {
            for q in p..n {
                let v = if p == q { theta[(idx, j)] } else { theta[(idx, j)] / std::f64::consts::SQRT_2 };
                g[j][(p, q)] = v;
                g[j][(q, p)] = v;
                idx += 1;
            }
        }
    }
    QuadraticVectorModel { a, g }
}

/// Unconstrained least squares; minimum Frobenius norm when underdetermined.
pub fn fit_least_squares(data: &MeasurementSet) -> Result<QuadraticVectorModel, LearnError> {
    if data.is_empty() {
        return Err(LearnError::Invalid("fitting needs at least one measurement".into()));
    }
    let n = data.dim();
    let rows: Vec<Vec<f64>> = data.pairs().iter().map(|(x, _)| features(x)).collect();
    let nf = rows[0].len();
    let phi = DMatrix::from_fn(rows.len(), nf, |k, f| rows[k][f]);
    let y = DMatrix::from_fn(data.len(), n, |k, j| data.pairs()[k].1[j]);
    let svd = phi.svd(true, true);
    let tol = 1e-8 * svd.singular_values.max().max(1e-300);
    let theta = svd.solve(&y, tol).map_err(|e| LearnError::Invalid(e.to_string()))?;
    Ok(model_from_coefficients(n, &theta))
}

/// Sorted variable indices of a monomial.
type Monomial = Vec<usize>;

fn mono(parts: &[usize]) -> Monomial {
    let mut m = parts.to_vec();
    m.sort_unstable();
    m
}

/// Polynomial with affine coefficients in the decision variables.
#[derive(Default)]
struct Poly(BTreeMap<Monomial, LinExpr>);

impl Poly {
    fn add(&mut self, m: Monomial, e: &LinExpr, scale: f64) {
        self.0.entry(m).or_insert_with(LinExpr::zero).add_scaled(e, scale);
    }
}

/// Basis `[1, x₁, …, xₙ]` as monomials.
fn gram_basis(n: usize) -> Vec<Monomial> {
    std::iter::once(Vec::new()).chain((0..n).map(|a| vec![a])).collect()
}

/// Adds `σ(x)·mult(x)` for `σ = zᵀQz`, `z = [1, x]`; `mult` is `(constant, linear)`.
fn add_sos_times(poly: &mut Poly, q: &SymVar, mult: (f64, &[f64])) {
    let basis = gram_basis(q.dim() - 1);
    for u in 0..basis.len() {
        for v in 0..basis.len() {
            let e = q.expr(u, v);
            let base: Vec<usize> = basis[u].iter().chain(&basis[v]).copied().collect();
            if mult.0 != 0.0 {
                poly.add(mono(&base), &e, mult.0);
            }
            for (l, hl) in mult.1.iter().enumerate() {
                if *hl != 0.0 {
                    let mut m = base.clone();
                    m.push(l);
                    poly.add(mono(&m), &e, *hl);
                }
            }
        }
    }
}

fn psd_of(p: &mut ConicProgram, q: &SymVar) {
    let mut blk = PsdBlock::new(q.dim());
    for i in 0..q.dim() {
        for j in i..q.dim() {
            blk.set(i, j, q.expr(i, j));
        }
    }
    p.psd(blk);
}

/// Gram matrices `Q_i^{j,±}` over `[1, x]`: `[output][sign][i]` with sign 0
/// for `γ + ĝⱼ`, 1 for `γ − ĝⱼ`, and `i = 0` the free multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SosCertificate {
    pub grams: Vec<[Vec<DMatrix<f64>>; 2]>,
}

impl SosCertificate {
    pub fn min_eigenvalue(&self) -> f64 {
        self.grams
            .iter()
            .flatten()
            .flatten()
            .map(|m| m.clone().symmetric_eigen().eigenvalues.min())
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest coefficient mismatch in `γ ± ĝⱼ = σ₀ + Σ σᵢ(bᵢ − hᵢᵀx)`.
    pub fn identity_residual(&self, model: &QuadraticVectorModel, s: &Polyhedron, gamma: f64) -> f64 {
        let n = model.dim();
        let mut worst = 0.0f64;
        let add = |map: &mut BTreeMap<Monomial, f64>, m: Monomial, v: f64| *map.entry(m).or_insert(0.0) += v;
        for (j, pair) in self.grams.iter().enumerate() {
            for (sign, grams) in pair.iter().enumerate() {
                let sg = if sign == 0 { 1.0 } else { -1.0 };
                let mut diff: BTreeMap<Monomial, f64> = BTreeMap::new();
                add(&mut diff, Vec::new(), gamma);
                for a in 0..n {
                    for b in 0..n {
                        add(&mut diff, mono(&[a, b]), sg * model.g[j][(a, b)]);
                    }
                }
                let basis = gram_basis(n);
                for (i, q) in grams.iter().enumerate() {
                    let (c0, lin) = if i == 0 {
                        (1.0, vec![0.0; n])
                    } else {
                        let h = &s.halfspaces()[i - 1];
                        (h.offset, h.normal.iter().map(|v| -v).collect())
                    };
                    for u in 0..=n {
                        for v in 0..=n {
                            let base: Vec<usize> = basis[u].iter().chain(&basis[v]).copied().collect();
                            add(&mut diff, mono(&base), -c0 * q[(u, v)]);
                            for (l, hl) in lin.iter().enumerate() {
                                let mut m = base.clone();
                                m.push(l);
                                add(&mut diff, mono(&m), -hl * q[(u, v)]);
                            }
                        }
                    }
                }
                worst = diff.values().fold(worst, |w, v| w.max(v.abs()));
            }
        }
        worst
    }
}

#[derive(Clone, Debug)]
pub struct SosFit {
    pub model: QuadraticVectorModel,
    pub certificate: SosCertificate,
    pub loss: f64,
}

/// Least squares subject to `Â ∈ U₀,A`, `‖Âxₖ − yₖ‖_∞ ≤ γ` and SOS
/// certificates of `|ĝⱼ| ≤ γ` on `S`. Only the constant bound (`d = 0`) is
/// supported.
pub fn fit_sos_constrained(
    data: &MeasurementSet,
    s: &Polyhedron,
    u: &NonlinearUncertainty,
    solver: &Solver,
) -> Result<SosFit, LearnError> {
    if data.is_empty() {
        return Err(LearnError::Invalid("fitting needs at least one measurement".into()));
    }
    if u.d != 0 {
        return Err(LearnError::Invalid("SOS fitting supports only a constant bound on g (d = 0)".into()));
    }
    check_problem(s, u, data)?;
    let n = s.dim();
    let gamma = u.gamma;
    let mut p = ConicProgram::new();
    let a: Vec<Vec<Var>> = (0..n).map(|_| p.add_vector("A", n)).collect();
    let g: Vec<SymVar> = (0..n).map(|_| p.add_symmetric("G", n)).collect();

    for (vj, v) in u.a.constraints() {
        let mut e = LinExpr::zero();
        for r in 0..n {
            for c in 0..n {
                e.add_term(a[r][c], vj[(r, c)]);
            }
        }
        p.le(e, (*v).into());
    }
    let mut resid = Vec::new();
    for (x, y) in data.pairs() {
        for j in 0..n {
            let ax = LinExpr::dot(x.as_slice(), &a[j].iter().map(|v| v.expr()).collect::<Vec<_>>());
            let mut gx = LinExpr::zero();
            for r in 0..n {
                for c in 0..n {
                    gx.add_term(g[j].var(r, c), x[r] * x[c]);
                }
            }
            p.le(ax.clone() - y[j], gamma.into());
            p.le(LinExpr::constant(y[j]) - ax.clone(), gamma.into());
            resid.push(ax + gx - y[j]);
        }
    }
    let tau = p.add_scalar("loss_root");
    p.soc(tau.expr(), resid);

    let mut gram_vars: Vec<[Vec<SymVar>; 2]> = Vec::new();
    for (j, gj) in g.iter().enumerate() {
        let mut pair: [Vec<SymVar>; 2] = [Vec::new(), Vec::new()];
        for (sign, grams) in pair.iter_mut().enumerate() {
            let sg = if sign == 0 { 1.0 } else { -1.0 };
            let mut poly = Poly::default();
            // γ ± ĝⱼ(x) − σ₀(x) − Σ σᵢ(x)(bᵢ − hᵢᵀx) ≡ 0
            poly.add(Vec::new(), &LinExpr::constant(gamma), 1.0);
            for r in 0..n {
                for c in 0..n {
                    poly.add(mono(&[r, c]), &gj.expr(r, c), sg);
                }
            }
            let q0 = p.add_symmetric(&format!("sigma0_{j}_{sign}"), n + 1);
            psd_of(&mut p, &q0);
            add_sos_times(&mut poly, &q0, (-1.0, &[]));
            grams.push(q0);
            for h in s.halfspaces() {
                let qi = p.add_symmetric("sigma", n + 1);
                psd_of(&mut p, &qi);
                let lin: Vec<f64> = h.normal.iter().copied().collect();
                add_sos_times(&mut poly, &qi, (-h.offset, &lin));
                grams.push(qi);
            }
            for (_, e) in poly.0 {
                p.eq(e);
            }
        }
        gram_vars.push(pair);
    }
    p.minimize(tau.expr());

    let sol = solver.solve(&p)?;
    if sol.status == Status::Infeasible {
        return Err(LearnError::Infeasible("data contradict the prior on (A, g)".into()));
    }
    let sol = sol.into_optimal()?;
    let a_val = DMatrix::from_fn(n, n, |r, c| sol.var(a[r][c]));
    let g_val: Vec<DMatrix<f64>> = g.iter().map(|gj| sol.sym(gj)).collect();
    let model = QuadraticVectorModel::new(a_val, g_val)?;
    let certificate = SosCertificate {
        grams: gram_vars
            .iter()
            .map(|pair| [pair[0].iter().map(|q| sol.sym(q)).collect(), pair[1].iter().map(|q| sol.sym(q)).collect()])
            .collect(),
    };
    let loss = model.loss(data);
    Ok(SosFit {
        model,
        certificate,
        loss,
    })
}

/// `sqrt(mean ‖f̂(z) − f⋆(z)‖²)` over `points`.
pub fn rmse(model: &QuadraticVectorModel, oracle: &mut SystemOracle<'_>, points: &[DVector<f64>]) -> Result<f64, LearnError> {
    if points.is_empty() {
        return Err(LearnError::Invalid("RMSE needs at least one test point".into()));
    }
    let total: f64 = points.iter().map(|z| (model.eval(z) - oracle(z)).norm_squared()).sum();
    Ok((total / points.len() as f64).sqrt())
}

/// `count` points uniform in an axis-aligned box.
pub fn uniform_box_points(rng: &mut impl Rng, lo: &[f64], hi: &[f64], count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..=*h))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_text_round_trip() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.5, 0.125, 3.0]);
        let g = vec![
            DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, -1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1e-9, 1e-9, 7.0]),
        ];
        let m = QuadraticVectorModel::new(a, g).unwrap();
        let back = QuadraticVectorModel::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
        assert!(QuadraticVectorModel::from_text("quadratic-vector-model 2\nn 1\n").is_err());
        assert!(QuadraticVectorModel::from_text(&m.to_text().replace("G 2", "G 3")).is_err());
    }

    #[test]
    fn model_rejects_asymmetric_g() {
        let g = vec![DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), DMatrix::zeros(2, 2)];
        assert!(QuadraticVectorModel::new(DMatrix::zeros(2, 2), g).is_err());
    }

    #[test]
    fn features_match_model_evaluation() {
        let x = DVector::from_column_slice(&[0.3, -0.7, 1.1]);
        let theta = DMatrix::from_fn(9, 3, |i, j| ((i * 3 + j) as f64).sin());
        let m = model_from_coefficients(3, &theta);
        let f = features(&x);
        for j in 0..3 {
            let direct: f64 = f.iter().enumerate().map(|(i, v)| v * theta[(i, j)]).sum();
            assert!((direct - m.eval(&x)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_directions_are_unit() {
        let mut r = rand::rng();
        for _ in 0..20 {
            assert!((sphere_direction(&mut r, 4).norm() - 1.0).abs() < 1e-12);
        }
    }
}
