//! Two-step safe learning of linear dynamics with an ellipsoidal prior on
//! `A⋆`, via variable elimination and the S-lemma.
//!
//! Matrices are flattened row-major as in [`crate::linear_onestep`].

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{
    quadratic_nonneg_to_psd, AffineQuadratic, ConicProgram, ConstraintId, DualBlock, LinExpr, QuadraticForm, Solver,
    Solution, Status, Var,
};
use crate::error::LearnError;
use crate::geometry::{Polyhedron, DEFAULT_RANK_TOL};
use crate::harness::{QueryChoice, StepRecord};
use crate::linear_onestep::{safe_region_min, LearnOutcome, LearnResult};

pub const DEFAULT_STRICT_TOL: f64 = 1e-9;

/// `U₀ = {A | q(vec A) ≤ 0}` for a strictly convex quadratic `q`.
#[derive(Clone, Debug, PartialEq)]
pub enum EllipsoidalMatrixUncertainty {
    General { n: usize, q: QuadraticForm },
    /// `‖A − A₀‖_F ≤ γ`
    FrobeniusBall { a0: DMatrix<f64>, gamma: f64 },
}

impl EllipsoidalMatrixUncertainty {
    pub fn general(n: usize, q: QuadraticForm) -> Result<Self, LearnError> {
        if q.dim() != n * n {
            return Err(LearnError::Dimension {
                expected: n * n,
                got: q.dim(),
            });
        }
        if !(q.min_quad_eigenvalue() > 0.0) {
            return Err(LearnError::Invalid("quadratic part of the prior must be positive definite".into()));
        }
        Ok(Self::General { n, q })
    }

    pub fn frobenius_ball(a0: DMatrix<f64>, gamma: f64) -> Result<Self, LearnError> {
        if a0.nrows() != a0.ncols() {
            return Err(LearnError::Invalid("nominal matrix must be square".into()));
        }
        if !(gamma > 0.0) {
            return Err(LearnError::Invalid(format!("ball radius must be positive, got {gamma}")));
        }
        Ok(Self::FrobeniusBall { a0, gamma })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::General { n, .. } => *n,
            Self::FrobeniusBall { a0, .. } => a0.nrows(),
        }
    }

    pub fn quadratic(&self) -> QuadraticForm {
        match self {
            Self::General { q, .. } => q.clone(),
            Self::FrobeniusBall { a0, gamma } => {
                let n = a0.nrows();
                let v = vec_of(a0);
                QuadraticForm::new(DMatrix::identity(n * n, n * n), &v * -2.0, v.norm_squared() - gamma * gamma)
            }
        }
    }

    pub fn contains(&self, a: &DMatrix<f64>, tol: f64) -> bool {
        self.quadratic().eval(&vec_of(a)) <= tol
    }
}

pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    let n = a.ncols();
    DVector::from_fn(a.nrows() * n, |i, _| a[(i / n, i % n)])
}

pub fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, b| v[a * n + b])
}

/// Length-two trajectories `(xⱼ, A⋆xⱼ, A⋆²xⱼ)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoStepData {
    n: usize,
    trajectories: Vec<(DVector<f64>, DVector<f64>, DVector<f64>)>,
}

impl TwoStepData {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            trajectories: Vec::new(),
        }
    }

    pub fn push(&mut self, x: DVector<f64>, y: DVector<f64>, z: DVector<f64>) -> Result<(), LearnError> {
        for v in [&x, &y, &z] {
            if v.len() != self.n {
                return Err(LearnError::Dimension {
                    expected: self.n,
                    got: v.len(),
                });
            }
        }
        self.trajectories.push((x, y, z));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[(DVector<f64>, DVector<f64>, DVector<f64>)] {
        &self.trajectories
    }

    /// Rank of `{xⱼ, yⱼ}`.
    pub fn direction_rank(&self, tol: f64) -> usize {
        if self.is_empty() {
            return 0;
        }
        let cols: Vec<&DVector<f64>> = self.trajectories.iter().flat_map(|(x, y, _)| [x, y]).collect();
        let m = DMatrix::from_fn(self.n, cols.len(), |i, j| cols[j][i]);
        let sv = m.singular_values();
        let max = sv.max();
        if max == 0.0 {
            return 0;
        }
        sv.iter().filter(|s| **s > tol * max).count()
    }
}

/// `g(â) = Â + Σ âᵢ Aᵢ` over the matrices satisfying `A xⱼ = yⱼ`, `A yⱼ = zⱼ`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineSubspaceParam {
    pub anchor: DMatrix<f64>,
    /// Frobenius-orthonormal.
    pub basis: Vec<DMatrix<f64>>,
}

impl AffineSubspaceParam {
    pub fn n_hat(&self) -> usize {
        self.basis.len()
    }

    pub fn eval(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.anchor.clone();
        for (ai, bi) in a.iter().zip(&self.basis) {
            m += bi * *ai;
        }
        m
    }

    /// Basis as the columns of an `n² × n̂` matrix.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        let n = self.anchor.nrows();
        DMatrix::from_fn(n * n, self.n_hat(), |i, l| self.basis[l][(i / n, i % n)])
    }

    /// `q ∘ g`
    pub fn pullback(&self, q: &QuadraticForm) -> QuadraticForm {
        q.compose_affine(&vec_of(&self.anchor), &self.basis_matrix())
    }
}

/// Solves the stacked linear constraints; `Inconsistent` when the least-norm
/// residual exceeds `1e-8` (relative).
pub fn consistent_subspace(data: &TwoStepData) -> Result<AffineSubspaceParam, LearnError> {
    let n = data.dim();
    let nn = n * n;
    let rows = 2 * n * data.len();
    // pad to at least n² rows so the SVD returns a full right basis
    let padded = rows.max(nn);
    let mut m = DMatrix::zeros(padded, nn);
    let mut rhs = DVector::zeros(padded);
    for (j, (x, y, z)) in data.trajectories().iter().enumerate() {
        for (t, (input, output)) in [(x, y), (y, z)].into_iter().enumerate() {
            for a in 0..n {
                let row = (2 * j + t) * n + a;
                for b in 0..n {
                    m[(row, a * n + b)] = input[b];
                }
                rhs[row] = output[a];
            }
        }
    }
    let svd = m.clone().svd(true, true);
    let v_t = svd.v_t.as_ref().expect("requested V");
    let s_max = svd.singular_values.max();
    let cutoff = DEFAULT_RANK_TOL * s_max.max(1e-300);
    let mut anchor = DVector::zeros(nn);
    let mut basis = Vec::new();
    let u = svd.u.as_ref().expect("requested U");
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        let vk = v_t.row(k).transpose();
        if s > cutoff && s_max > 0.0 {
            anchor += &vk * (u.column(k).dot(&rhs) / s);
        } else {
            basis.push(unvec(&vk, n));
        }
    }
    let resid = (&m * &anchor - &rhs).norm();
    if resid > 1e-8 * (1.0 + rhs.norm()) {
        return Err(LearnError::Inconsistent {
            k: data.len(),
            partial: Vec::new(),
        });
    }
    Ok(AffineSubspaceParam {
        anchor: unvec(&anchor, n),
        basis,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum StrictInterior {
    Point(DVector<f64>),
    /// Minimum value of `q̂` and its minimizer.
    Fails { minimizer: DVector<f64>, value: f64 },
}

/// Minimizes a strictly convex `q̂` in closed form.
pub fn check_strict_interior(qhat: &QuadraticForm, strict_tol: f64) -> Result<StrictInterior, LearnError> {
    let chol = qhat
        .quad
        .clone()
        .cholesky()
        .ok_or_else(|| LearnError::Invalid("pulled-back prior is not strictly convex".into()))?;
    let a_bar = chol.solve(&qhat.lin) * -0.5;
    let value = qhat.eval(&a_bar);
    Ok(if value < -strict_tol {
        StrictInterior::Point(a_bar)
    } else {
        StrictInterior::Fails {
            minimizer: a_bar,
            value,
        }
    })
}

/// Coordinate widths of `{g(â) | q̂(â) ≤ 0}`.
pub fn entry_widths(param: &AffineSubspaceParam, qhat: &QuadraticForm) -> Result<DVector<f64>, LearnError> {
    let n = param.anchor.nrows();
    if param.n_hat() == 0 {
        return Ok(DVector::zeros(n * n));
    }
    let rho = match check_strict_interior(qhat, 0.0)? {
        StrictInterior::Point(c) => -qhat.eval(&c),
        StrictInterior::Fails { .. } => 0.0,
    };
    let b = param.basis_matrix();
    let qinv = qhat
        .quad
        .clone()
        .try_inverse()
        .ok_or_else(|| LearnError::Invalid("pulled-back prior is singular".into()))?;
    Ok(DVector::from_fn(n * n, |e, _| {
        let row = b.row(e);
        2.0 * (rho * (row * &qinv * row.transpose())[(0, 0)]).max(0.0).sqrt()
    }))
}

/// The S-lemma SDP and handles into it.
pub struct TwostepSdp {
    pub program: ConicProgram,
    pub x: Vec<Var>,
    pub lambda1: Vec<Var>,
    pub lambda2: Vec<Var>,
    pub blocks: Vec<ConstraintId>,
    pub param: AffineSubspaceParam,
    pub qhat: QuadraticForm,
}

/// Multipliers and block eigenvalues at a solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SLemmaCertificate {
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub min_eigenvalues: Vec<f64>,
}

fn check_problem(s: &Polyhedron, u0: &EllipsoidalMatrixUncertainty, data: &TwoStepData, c: &DVector<f64>) -> Result<(), LearnError> {
    let n = s.dim();
    for got in [u0.dim(), data.dim(), c.len()] {
        if got != n {
            return Err(LearnError::Dimension { expected: n, got });
        }
    }
    Ok(())
}

pub fn build_twostep_sdp(
    s: &Polyhedron,
    u0: &EllipsoidalMatrixUncertainty,
    data: &TwoStepData,
    c: &DVector<f64>,
    strict_tol: f64,
) -> Result<TwostepSdp, LearnError> {
    check_problem(s, u0, data, c)?;
    let n = s.dim();
    let param = consistent_subspace(data)?;
    let m = param.n_hat();
    if m == 0 {
        return Err(LearnError::StrictInterior(
            "the data determine the matrix; no uncertainty remains".into(),
        ));
    }
    let qhat = param.pullback(&u0.quadratic());
    if let StrictInterior::Fails { value, .. } = check_strict_interior(&qhat, strict_tol)? {
        return Err(LearnError::StrictInterior(format!(
            "the prior meets the data subspace in at most one point (min q̂ = {value:e})"
        )));
    }

    let mut p = ConicProgram::new();
    let x = p.add_vector("x", n);
    let xe: Vec<LinExpr> = x.iter().map(|v| v.expr()).collect();
    let a_hat = &param.anchor;
    let a_hat_sq = a_hat * a_hat;
    // products AₗAₘ and anticommutators ÂAₗ + AₗÂ, shared by all facets
    let anti: Vec<DMatrix<f64>> = param.basis.iter().map(|al| a_hat * al + al * a_hat).collect();
    let mut lambda1 = Vec::new();
    let mut lambda2 = Vec::new();
    let mut blocks = Vec::new();
    let row = |h: &DVector<f64>, mat: &DMatrix<f64>| LinExpr::dot((mat.transpose() * h).as_slice(), &xe);

    for hs in s.halfspaces() {
        let h = &hs.normal;
        p.le(LinExpr::dot(h.as_slice(), &xe), hs.offset.into());

        let mut q1 = AffineQuadratic::zero(m);
        for (l, al) in param.basis.iter().enumerate() {
            q1.lin[l] = row(h, al);
        }
        q1.constant = row(h, a_hat) - hs.offset;

        let mut q2 = AffineQuadratic::zero(m);
        for l in 0..m {
            q2.lin[l] = row(h, &anti[l]);
            for k in l..m {
                let sym = (&param.basis[l] * &param.basis[k] + &param.basis[k] * &param.basis[l]) * 0.5;
                let e = row(h, &sym);
                q2.quad[l * m + k] = e.clone();
                q2.quad[k * m + l] = e;
            }
        }
        q2.constant = row(h, &a_hat_sq) - hs.offset;

        for (q, store) in [(q1, &mut lambda1), (q2, &mut lambda2)] {
            let lam = p.add_scalar("lambda");
            p.nonneg(lam.expr());
            let mut cert = AffineQuadratic::scaled_by(&qhat, lam);
            cert.sub_assign(&q);
            blocks.push(p.psd(quadratic_nonneg_to_psd(&cert)));
            store.push(lam);
        }
    }
    p.minimize(LinExpr::dot(c.as_slice(), &xe));
    Ok(TwostepSdp {
        program: p,
        x,
        lambda1,
        lambda2,
        blocks,
        param,
        qhat,
    })
}

impl TwostepSdp {
    pub fn certificate(&self, sol: &Solution) -> SLemmaCertificate {
        let min_eigenvalues = self
            .blocks
            .iter()
            .map(|id| match self.program.constraint(*id) {
                crate::conic::Constraint::Psd(b) => b.min_eigenvalue(&sol.primal),
                _ => f64::NAN,
            })
            .collect();
        SLemmaCertificate {
            lambda1: sol.vars(&self.lambda1),
            lambda2: sol.vars(&self.lambda2),
            min_eigenvalues,
        }
    }

    /// Dual PSD matrices of the certificate blocks.
    pub fn block_duals<'a>(&self, sol: &'a Solution) -> Vec<&'a DualBlock> {
        self.blocks.iter().map(|id| sol.dual(*id)).collect()
    }
}

/// Optimal two-step query and its certificate.
#[derive(Clone, Debug)]
pub struct TwostepQuery {
    pub x: DVector<f64>,
    pub value: f64,
    pub certificate: SLemmaCertificate,
}

pub fn solve_twostep(
    s: &Polyhedron,
    u0: &EllipsoidalMatrixUncertainty,
    data: &TwoStepData,
    c: &DVector<f64>,
    strict_tol: f64,
    solver: &Solver,
) -> Result<TwostepQuery, LearnError> {
    let sdp = build_twostep_sdp(s, u0, data, c, strict_tol)?;
    let sol = solver.solve(&sdp.program)?;
    match sol.status {
        Status::Infeasible => Err(LearnError::Infeasible("no two-step safe query exists".into())),
        Status::Unbounded => Err(LearnError::Infeasible("two-step safe cost is unbounded below".into())),
        _ => {
            let sol = sol.into_optimal()?;
            Ok(TwostepQuery {
                x: DVector::from_vec(sol.vars(&sdp.x)),
                value: sol.objective_value,
                certificate: sdp.certificate(&sol),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwostepOptions {
    pub strict_tol: f64,
    /// Maximum number of trajectories; `None` means `n`.
    pub budget: Option<usize>,
    pub safety_tol: f64,
}

impl Default for TwostepOptions {
    fn default() -> Self {
        Self {
            strict_tol: DEFAULT_STRICT_TOL,
            budget: None,
            safety_tol: 1e-6,
        }
    }
}

/// Oracle returning `(A⋆x, A⋆²x)`.
pub type TrajectoryOracle<'a> = dyn FnMut(&DVector<f64>) -> (DVector<f64>, DVector<f64>) + 'a;

/// What the data and prior pin down before the next query.
enum Knowledge {
    Learned(DMatrix<f64>),
    Uncertain { width: f64 },
}

fn assess(
    u0: &EllipsoidalMatrixUncertainty,
    data: &TwoStepData,
    strict_tol: f64,
) -> Result<(Knowledge, usize), LearnError> {
    let param = consistent_subspace(data)?;
    let q = u0.quadratic();
    let inconsistent = || LearnError::Inconsistent {
        k: data.len(),
        partial: Vec::new(),
    };
    if param.n_hat() == 0 {
        if q.eval(&vec_of(&param.anchor)) > strict_tol.max(1e-7) {
            return Err(inconsistent());
        }
        return Ok((Knowledge::Learned(param.anchor), 0));
    }
    let qhat = param.pullback(&q);
    match check_strict_interior(&qhat, strict_tol)? {
        StrictInterior::Point(_) => {
            let width = entry_widths(&param, &qhat)?.max();
            Ok((Knowledge::Uncertain { width }, param.n_hat()))
        }
        StrictInterior::Fails { minimizer, value } => {
            if value > strict_tol.max(1e-7) {
                return Err(inconsistent());
            }
            Ok((Knowledge::Learned(param.eval(&minimizer)), param.n_hat()))
        }
    }
}

/// Repeatedly queries the cheapest two-step safe point. Stops with the
/// matrix once the data determine it, or declares `Impossible` when a
/// trajectory fails to shrink the consistent subspace or the budget runs out.
pub fn learn_two_step(
    s: &Polyhedron,
    u0: &EllipsoidalMatrixUncertainty,
    c: &DVector<f64>,
    opts: TwostepOptions,
    oracle: &mut TrajectoryOracle<'_>,
    solver: &Solver,
) -> Result<LearnOutcome, LearnError> {
    let n = s.dim();
    let mut data = TwoStepData::new(n);
    check_problem(s, u0, &data, c)?;
    let budget = opts.budget.unwrap_or(n);
    let mut steps: Vec<StepRecord> = Vec::new();
    let with_partial = |e: LearnError, steps: &[StepRecord]| match e {
        LearnError::Inconsistent { k, .. } => LearnError::Inconsistent {
            k,
            partial: steps.to_vec(),
        },
        LearnError::Geometry(source) => LearnError::Step {
            k: steps.len(),
            source,
            partial: steps.to_vec(),
        },
        e => e,
    };
    let finish = |result, steps: Vec<StepRecord>| LearnOutcome {
        measurements_used: steps.len(),
        result,
        steps,
    };
    let mut prev_dim = usize::MAX;

    loop {
        let (knowledge, dim) = assess(u0, &data, opts.strict_tol).map_err(|e| with_partial(e, &steps))?;
        let width = match knowledge {
            Knowledge::Learned(a) => {
                info!("matrix determined after {} trajectories", data.len());
                return Ok(finish(LearnResult::Learned(a), steps));
            }
            Knowledge::Uncertain { width } => width,
        };
        if dim >= prev_dim {
            let why = format!("trajectory {} did not shrink the consistent subspace (dimension {dim})", data.len());
            return Ok(finish(LearnResult::Impossible(why), steps));
        }
        if data.len() >= budget {
            let why = format!("trajectory budget {budget} exhausted with {dim} free parameter(s)");
            return Ok(finish(LearnResult::Impossible(why), steps));
        }
        prev_dim = dim;

        let q = match solve_twostep(s, u0, &data, c, opts.strict_tol, solver) {
            Ok(q) => q,
            Err(LearnError::Infeasible(why)) => return Ok(finish(LearnResult::Impossible(why), steps)),
            Err(e) => return Err(with_partial(e, &steps)),
        };
        let k = steps.len() + 1;
        let (y, z) = oracle(&q.x);
        for v in [&y, &z] {
            if v.len() != n {
                return Err(LearnError::Dimension { expected: n, got: v.len() });
            }
        }
        for (what, v) in [("query", &q.x), ("first successor", &y), ("second successor", &z)] {
            let viol = s.max_violation(v)?;
            if viol > opts.safety_tol {
                return Err(LearnError::SafetyViolation {
                    k,
                    what,
                    violation: viol,
                    partial: steps,
                });
            }
        }
        let cost = c.dot(&q.x);
        debug!("trajectory {k}: x = {:?}, lambdas {:?}", q.x.as_slice(), q.certificate.lambda2);
        steps.push(StepRecord {
            k,
            x: q.x.as_slice().to_vec(),
            observed: vec![y.as_slice().to_vec(), z.as_slice().to_vec()],
            step_cost: cost,
            cumulative_cost: steps.last().map_or(0.0, |s| s.cumulative_cost) + cost,
            uncertainty_width: width,
            choice: QueryChoice::Cheapest,
            cost_vector: c.as_slice().to_vec(),
        });
        data.push(q.x, y, z)?;
    }
}

/// Number of trajectories needed when each one contributes two directions.
pub fn default_trajectories(n: usize) -> usize {
    n.div_ceil(2)
}

/// `m · min cᵀx` over the initial two-step safe set (offline baseline).
pub fn twostep_offline_cost(
    s: &Polyhedron,
    u0: &EllipsoidalMatrixUncertainty,
    c: &DVector<f64>,
    m: usize,
    solver: &Solver,
) -> Result<f64, LearnError> {
    let q = solve_twostep(s, u0, &TwoStepData::new(s.dim()), c, DEFAULT_STRICT_TOL, solver)?;
    Ok(m as f64 * q.value)
}

/// `m · min {cᵀx | x, A⋆x, A⋆²x ∈ S}`.
pub fn twostep_cost_lower_bound(
    s: &Polyhedron,
    a_star: &DMatrix<f64>,
    c: &DVector<f64>,
    m: usize,
    solver: &Solver,
) -> Result<f64, LearnError> {
    let (v, _) = safe_region_min(s, &[a_star.clone(), a_star * a_star], c, solver)?;
    Ok(m as f64 * v)
}
