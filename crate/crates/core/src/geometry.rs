//! Polyhedral primitives: membership, support, singleton detection, basis
//! extraction, numeric linear independence and 2-D projection.

use std::f64::consts::PI;
use std::io::{Read, Write};

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{ConicError, ConicProgram, LinExpr, Solver, Status, Var};

pub const DEFAULT_RANK_TOL: f64 = 1e-7;
pub const DEFAULT_SINGLETON_TOL: f64 = 1e-6;
pub const DEFAULT_DIRECTIONS: usize = 128;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("halfspace normal is zero")]
    ZeroNormal,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] ConicError),
    #[error("polygon csv: {0}")]
    Csv(#[from] csv::Error),
}

fn check_dim(expected: usize, got: usize) -> Result<(), GeometryError> {
    if expected != got {
        return Err(GeometryError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// `{x | hᵀx ≤ b}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub normal: DVector<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: DVector<f64>, offset: f64) -> Result<Self, GeometryError> {
        if normal.iter().all(|v| *v == 0.0) {
            return Err(GeometryError::ZeroNormal);
        }
        Ok(Self { normal, offset })
    }

    /// `hᵀx − b`, positive when violated.
    pub fn slack(&self, x: &DVector<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyhedron {
    dim: usize,
    halfspaces: Vec<Halfspace>,
}

impl Polyhedron {
    pub fn new(dim: usize, halfspaces: Vec<Halfspace>) -> Result<Self, GeometryError> {
        if dim == 0 {
            return Err(GeometryError::Invalid("polyhedron dimension must be positive".into()));
        }
        for h in &halfspaces {
            check_dim(dim, h.normal.len())?;
        }
        Ok(Self { dim, halfspaces })
    }

    /// Rows of `h` are normals.
    pub fn from_matrix(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<Self, GeometryError> {
        check_dim(h.nrows(), b.len())?;
        let hs = (0..h.nrows())
            .map(|i| Halfspace::new(h.row(i).transpose(), b[i]))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(h.ncols(), hs)
    }

    /// `{x | lo ≤ x ≤ hi}`
    pub fn boxed(lo: &[f64], hi: &[f64]) -> Result<Self, GeometryError> {
        check_dim(lo.len(), hi.len())?;
        let n = lo.len();
        let mut hs = Vec::with_capacity(2 * n);
        for i in 0..n {
            hs.push(Halfspace::new(DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 }), hi[i])?);
            hs.push(Halfspace::new(DVector::from_fn(n, |k, _| if k == i { -1.0 } else { 0.0 }), -lo[i])?);
        }
        Self::new(n, hs)
    }

    pub fn unit_box(n: usize) -> Self {
        Self::boxed(&vec![-1.0; n], &vec![1.0; n]).expect("valid box")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn len(&self) -> usize {
        self.halfspaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.halfspaces.is_empty()
    }

    pub fn h_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, j| self.halfspaces[i].normal[j])
    }

    pub fn offsets(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.halfspaces.iter().map(|h| h.offset))
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool, GeometryError> {
        Ok(self.max_violation(x)? <= tol)
    }

    /// Largest `hᵢᵀx − bᵢ`, or −∞ without halfspaces.
    pub fn max_violation(&self, x: &DVector<f64>) -> Result<f64, GeometryError> {
        check_dim(self.dim, x.len())?;
        Ok(self.halfspaces.iter().map(|h| h.slack(x)).fold(f64::NEG_INFINITY, f64::max))
    }

    pub fn lifted(&self) -> LiftedPolyhedron {
        LiftedPolyhedron::new(self.h_matrix(), DMatrix::zeros(self.len(), 0), self.offsets()).expect("consistent shapes")
    }
}

/// `{x | ∃y: Ax + By ≤ c, Eₓx + E_y y = g}`; the equality rows are optional.
#[derive(Clone, Debug)]
pub struct LiftedPolyhedron {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DMatrix<f64>,
    pub c_eq: DVector<f64>,
}

impl LiftedPolyhedron {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self, GeometryError> {
        check_dim(a.nrows(), b.nrows())?;
        check_dim(a.nrows(), c.len())?;
        let (n, p) = (a.ncols(), b.ncols());
        Ok(Self {
            a,
            b,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DMatrix::zeros(0, p),
            c_eq: DVector::zeros(0),
        })
    }

    pub fn with_equalities(
        mut self,
        a_eq: DMatrix<f64>,
        b_eq: DMatrix<f64>,
        c_eq: DVector<f64>,
    ) -> Result<Self, GeometryError> {
        check_dim(self.dim(), a_eq.ncols())?;
        check_dim(self.lifted_dim(), b_eq.ncols())?;
        check_dim(a_eq.nrows(), b_eq.nrows())?;
        check_dim(a_eq.nrows(), c_eq.len())?;
        self.a_eq = a_eq;
        self.b_eq = b_eq;
        self.c_eq = c_eq;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn lifted_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Adds `Ax + By ≤ λc`, `Eₓx + E_y y = λg` for the given variables
    /// (`λ = 1` when `scale` is `None`).
    fn constrain(&self, prog: &mut ConicProgram, x: &[LinExpr], y: &[LinExpr], scale: Option<Var>) {
        let rhs = |v: f64| match scale {
            Some(l) => LinExpr::term(l, v),
            None => LinExpr::constant(v),
        };
        for i in 0..self.a.nrows() {
            let lhs = row_expr(self.a.row(i).iter(), x) + row_expr(self.b.row(i).iter(), y);
            prog.le(lhs, rhs(self.c[i]));
        }
        for i in 0..self.a_eq.nrows() {
            let lhs = row_expr(self.a_eq.row(i).iter(), x) + row_expr(self.b_eq.row(i).iter(), y);
            prog.eq(lhs - rhs(self.c_eq[i]));
        }
    }

    /// Program over `(x, y)` with the polyhedron's constraints and no objective.
    pub fn to_region(&self) -> ConicRegion {
        let mut prog = ConicProgram::new();
        let x = exprs(&prog.add_vector("x", self.dim()));
        let y = exprs(&prog.add_vector("y", self.lifted_dim()));
        self.constrain(&mut prog, &x, &y, None);
        ConicRegion::new(prog, x).with_lifted(y)
    }

    /// Some `(x, y)` in the polyhedron, or `None` when it is empty.
    pub fn feasible_point(&self, solver: &Solver) -> Result<Option<(DVector<f64>, DVector<f64>)>, GeometryError> {
        let region = self.to_region();
        let sol = solver.solve(&region.program)?;
        match sol.status {
            Status::Optimal => Ok(Some((
                eval_all(&region.coords, &sol.primal),
                eval_all(&region.lifted, &sol.primal),
            ))),
            Status::Infeasible => Ok(None),
            _ => Err(GeometryError::Solver(sol.into_optimal().unwrap_err())),
        }
    }

    /// Whether some `y` makes `(x, y)` feasible, allowing violation `tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64, solver: &Solver) -> Result<bool, GeometryError> {
        check_dim(self.dim(), x.len())?;
        let mut prog = ConicProgram::new();
        let y = exprs(&prog.add_vector("y", self.lifted_dim()));
        let t = prog.add_scalar("t");
        let xc: Vec<LinExpr> = x.iter().map(|v| LinExpr::constant(*v)).collect();
        for i in 0..self.a.nrows() {
            let lhs = row_expr(self.a.row(i).iter(), &xc) + row_expr(self.b.row(i).iter(), &y);
            prog.le(lhs, t.expr() + self.c[i]);
        }
        for i in 0..self.a_eq.nrows() {
            let lhs = row_expr(self.a_eq.row(i).iter(), &xc) + row_expr(self.b_eq.row(i).iter(), &y);
            prog.le(lhs.clone() - self.c_eq[i], t.expr());
            prog.le(-lhs + self.c_eq[i], t.expr());
        }
        prog.nonneg(t.expr() + 1.0);
        prog.minimize(t.expr());
        let sol = solver.solve(&prog)?;
        match sol.status {
            Status::Optimal => Ok(sol.objective_value <= tol),
            Status::Infeasible => Ok(false),
            _ => Err(GeometryError::Solver(sol.into_optimal().unwrap_err())),
        }
    }
}

fn exprs(vars: &[Var]) -> Vec<LinExpr> {
    vars.iter().map(|v| v.expr()).collect()
}

fn row_expr<'a>(coefs: impl Iterator<Item = &'a f64>, x: &[LinExpr]) -> LinExpr {
    let mut e = LinExpr::zero();
    for (a, xi) in coefs.zip(x) {
        if *a != 0.0 {
            e.add_scaled(xi, *a);
        }
    }
    e
}

fn eval_all(es: &[LinExpr], primal: &[f64]) -> DVector<f64> {
    DVector::from_iterator(es.len(), es.iter().map(|e| e.eval(primal)))
}

/// Outcome of maximizing `dᵀx` over a region.
#[derive(Clone, Debug, PartialEq)]
pub enum Support {
    Bounded { value: f64, point: DVector<f64> },
    Unbounded,
    Empty,
}

impl Support {
    pub fn value(&self) -> Option<f64> {
        match self {
            Support::Bounded { value, .. } => Some(*value),
            _ => None,
        }
    }

    pub fn point(&self) -> Option<&DVector<f64>> {
        match self {
            Support::Bounded { point, .. } => Some(point),
            _ => None,
        }
    }
}

/// A convex set in ℝⁿ that answers support queries through a solver.
pub trait SupportOracle {
    fn dim(&self) -> usize;
    fn support(&self, d: &[f64], solver: &Solver) -> Result<Support, GeometryError>;
}

/// Projection onto `coords` of the feasible set of a conic program.
#[derive(Clone, Debug)]
pub struct ConicRegion {
    pub program: ConicProgram,
    pub coords: Vec<LinExpr>,
    lifted: Vec<LinExpr>,
}

impl ConicRegion {
    pub fn new(program: ConicProgram, coords: Vec<LinExpr>) -> Self {
        Self {
            program,
            coords,
            lifted: Vec::new(),
        }
    }

    fn with_lifted(mut self, lifted: Vec<LinExpr>) -> Self {
        self.lifted = lifted;
        self
    }
}

impl SupportOracle for ConicRegion {
    fn dim(&self) -> usize {
        self.coords.len()
    }

    fn support(&self, d: &[f64], solver: &Solver) -> Result<Support, GeometryError> {
        check_dim(self.dim(), d.len())?;
        let mut prog = self.program.clone();
        prog.maximize(LinExpr::dot(d, &self.coords));
        let sol = solver.solve(&prog)?;
        match sol.status {
            Status::Optimal => Ok(Support::Bounded {
                value: sol.objective_value,
                point: eval_all(&self.coords, &sol.primal),
            }),
            Status::Unbounded => Ok(Support::Unbounded),
            Status::Infeasible => Ok(Support::Empty),
            Status::NumericalFailure => Err(GeometryError::Solver(sol.into_optimal().unwrap_err())),
        }
    }
}

impl SupportOracle for LiftedPolyhedron {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn support(&self, d: &[f64], solver: &Solver) -> Result<Support, GeometryError> {
        match self.to_region().support(d, solver) {
            Err(GeometryError::Solver(ConicError::NumericalFailure(msg))) if self.a_eq.nrows() > 0 => {
                debug!("retrying support with equalities eliminated ({msg})");
                self.support_reduced(d, solver)
            }
            other => other,
        }
    }
}

impl LiftedPolyhedron {
    /// Support over `z = z₀ + N w`, where `N` spans the null space of the
    /// equality rows. Degenerate equality systems (a single feasible point,
    /// or active bounds at it) are much easier for the solver in this form.
    fn support_reduced(&self, d: &[f64], solver: &Solver) -> Result<Support, GeometryError> {
        let (n, p) = (self.dim(), self.lifted_dim());
        let nz = n + p;
        let m = self.a_eq.nrows();
        let rows = m.max(nz);
        let mut full = DMatrix::zeros(rows, nz);
        full.view_mut((0, 0), (m, n)).copy_from(&self.a_eq);
        full.view_mut((0, n), (m, p)).copy_from(&self.b_eq);
        let mut rhs = DVector::zeros(rows);
        rhs.rows_mut(0, m).copy_from(&self.c_eq);
        let svd = full.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let tol = 1e-10 * smax.max(1.0);
        let z0 = svd
            .solve(&rhs, tol)
            .map_err(|e| GeometryError::Invalid(e.to_string()))?;
        let scale = 1.0 + self.c_eq.amax();
        if (&full * &z0 - &rhs).amax() > 1e-7 * scale {
            return Ok(Support::Empty);
        }
        let v_t = svd.v_t.as_ref().expect("requested");
        let null: Vec<DVector<f64>> = (0..nz)
            .filter(|&i| svd.singular_values[i] <= tol)
            .map(|i| v_t.row(i).transpose())
            .collect();
        let basis = if null.is_empty() {
            DMatrix::zeros(nz, 0)
        } else {
            DMatrix::from_columns(&null)
        };
        let ineq = {
            let mut g = DMatrix::zeros(self.a.nrows(), nz);
            g.view_mut((0, 0), (self.a.nrows(), n)).copy_from(&self.a);
            g.view_mut((0, n), (self.a.nrows(), p)).copy_from(&self.b);
            g
        };
        let slack0 = &self.c - &ineq * &z0;
        let x_of = |z: &DVector<f64>| z.rows(0, n).into_owned();
        if basis.ncols() == 0 {
            let cscale = 1.0 + self.c.amax();
            if slack0.min() < -1e-7 * cscale {
                return Ok(Support::Empty);
            }
            let x = x_of(&z0);
            return Ok(Support::Bounded {
                value: DVector::from_column_slice(d).dot(&x),
                point: x,
            });
        }
        let g = &ineq * &basis;
        let reduced = LiftedPolyhedron::new(DMatrix::zeros(g.nrows(), 0), g, slack0)?;
        let dx = DVector::from_column_slice(d);
        let dw = basis.rows(0, n).transpose() * &dx;
        let offset = dx.dot(&x_of(&z0));
        let region = reduced.to_region();
        let mut prog = region.program.clone();
        prog.maximize(LinExpr::dot(dw.as_slice(), &region.lifted));
        let sol = solver.solve(&prog)?;
        match sol.status {
            Status::Optimal => {
                let w = eval_all(&region.lifted, &sol.primal);
                let x = x_of(&(&z0 + &basis * w));
                Ok(Support::Bounded {
                    value: sol.objective_value + offset,
                    point: x,
                })
            }
            Status::Unbounded => Ok(Support::Unbounded),
            Status::Infeasible => Ok(Support::Empty),
            Status::NumericalFailure => Err(GeometryError::Solver(sol.into_optimal().unwrap_err())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SingletonTest {
    Singleton(DVector<f64>),
    NotSingleton,
    Empty,
}

/// Coordinate-wise bounds of a region; `None` when it is empty. Unbounded
/// coordinates get infinite bounds.
pub fn bounding_box(p: &dyn SupportOracle, solver: &Solver) -> Result<Option<(DVector<f64>, DVector<f64>)>, GeometryError> {
    let n = p.dim();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        for sign in [1.0, -1.0] {
            e[i] = sign;
            let v = match p.support(&e, solver)? {
                Support::Empty => return Ok(None),
                Support::Unbounded => f64::INFINITY,
                Support::Bounded { value, .. } => value,
            };
            if sign > 0.0 {
                hi[i] = v;
            } else {
                lo[i] = -v;
            }
        }
    }
    Ok(Some((lo, hi)))
}

/// Largest coordinate width of a bounding box.
pub fn box_width(lo: &DVector<f64>, hi: &DVector<f64>) -> f64 {
    hi.iter().zip(lo.iter()).map(|(h, l)| h - l).fold(0.0, f64::max)
}

/// Maximizes and minimizes each coordinate (2n solves).
pub fn is_singleton(p: &dyn SupportOracle, tol: f64, solver: &Solver) -> Result<SingletonTest, GeometryError> {
    Ok(match bounding_box(p, solver)? {
        None => SingletonTest::Empty,
        Some((lo, hi)) if box_width(&lo, &hi) <= tol => SingletonTest::Singleton((lo + hi) * 0.5),
        Some(_) => SingletonTest::NotSingleton,
    })
}

/// Linearly independent vectors, checked by a relative singular-value
/// threshold: `σ_min ≥ rank_tolerance · σ_max` of the stacked rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    vectors: Vec<DVector<f64>>,
    pub rank_tolerance: f64,
}

impl BasisSet {
    pub fn new(rank_tolerance: f64) -> Self {
        Self {
            vectors: Vec::new(),
            rank_tolerance,
        }
    }

    pub fn vectors(&self) -> &[DVector<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Appends `x` if it is independent of the current vectors.
    pub fn push(&mut self, x: DVector<f64>) -> bool {
        if !independent_of(&x, self) {
            return false;
        }
        self.vectors.push(x);
        true
    }

    /// Vectors as rows.
    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), n, |i, j| self.vectors[i][j])
    }
}

/// `σ_min / σ_max` of the basis with `x` appended (0 for the zero vector).
pub fn independence_ratio(x: &DVector<f64>, basis: &BasisSet) -> f64 {
    let n = x.len();
    let k = basis.len() + 1;
    if k > n {
        return 0.0;
    }
    let m = DMatrix::from_fn(k, n, |i, j| if i < k - 1 { basis.vectors[i][j] } else { x[j] });
    let sv = m.singular_values();
    let max = sv.max();
    if max == 0.0 {
        return 0.0;
    }
    sv.min() / max
}

pub fn independent_of(x: &DVector<f64>, basis: &BasisSet) -> bool {
    if let Some(v) = basis.vectors.first() {
        if v.len() != x.len() {
            return false;
        }
    }
    independence_ratio(x, basis) >= basis.rank_tolerance
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisOptions {
    pub rank_tol: f64,
    /// A coordinate of the normalized direction counts as nonzero above this.
    pub zero_tol: f64,
}

impl Default for BasisOptions {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            zero_tol: DEFAULT_SINGLETON_TOL,
        }
    }
}

/// Vectors of `P` forming a basis of its linear span. Each round solves up to
/// `2n` LPs over the homogenized system with the direction normalized by
/// `|xᵢ| ≤ 1` and `λ± ≤ 1`.
pub fn span_basis(p: &LiftedPolyhedron, opts: BasisOptions, solver: &Solver) -> Result<BasisSet, GeometryError> {
    let n = p.dim();
    let mut basis = BasisSet::new(opts.rank_tol);
    let Some(first) = p.feasible_point(solver)? else {
        return Ok(basis);
    };
    let mut lifted_of_basis: Vec<DVector<f64>> = Vec::new();

    while basis.len() < n {
        let (x_hat, y_hat) = match (basis.vectors.first(), lifted_of_basis.first()) {
            (Some(x), Some(y)) => (x.clone(), y.clone()),
            _ => first.clone(),
        };
        let mut prog = ConicProgram::new();
        let xp = exprs(&prog.add_vector("xp", n));
        let xm = exprs(&prog.add_vector("xm", n));
        let yp = exprs(&prog.add_vector("yp", p.lifted_dim()));
        let ym = exprs(&prog.add_vector("ym", p.lifted_dim()));
        let lp = prog.add_scalar("lp");
        let lm = prog.add_scalar("lm");
        p.constrain(&mut prog, &xp, &yp, Some(lp));
        p.constrain(&mut prog, &xm, &ym, Some(lm));
        for l in [lp, lm] {
            prog.nonneg(l.expr());
            prog.le(l.expr(), 1.0.into());
        }
        let x: Vec<LinExpr> = xp.iter().zip(&xm).map(|(a, b)| a.clone() - b.clone()).collect();
        for xi in &x {
            prog.le(xi.clone(), 1.0.into());
            prog.le(-xi.clone(), 1.0.into());
        }
        for e in basis.vectors() {
            prog.eq(row_expr(e.iter(), &x));
        }

        let mut found = false;
        'coords: for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut q = prog.clone();
                q.maximize(x[i].clone() * sign);
                let sol = solver.solve(&q)?.into_optimal()?;
                if sol.objective_value <= opts.zero_tol {
                    continue;
                }
                let shifted = |xs: &[LinExpr], ys: &[LinExpr], l: Var| {
                    let s = sol.var(l) + 1.0;
                    (
                        (eval_all(xs, &sol.primal) + &x_hat) / s,
                        (eval_all(ys, &sol.primal) + &y_hat) / s,
                    )
                };
                let plus = shifted(&xp, &yp, lp);
                let minus = shifted(&xm, &ym, lm);
                let best = if independence_ratio(&plus.0, &basis) >= independence_ratio(&minus.0, &basis) {
                    plus
                } else {
                    minus
                };
                if basis.push(best.0) {
                    lifted_of_basis.push(best.1);
                    debug!("span_basis: vector {} from coordinate {i}", basis.len());
                    found = true;
                    break 'coords;
                }
            }
        }
        if !found {
            break;
        }
    }
    Ok(basis)
}

/// Outer polygon of the projection of a region onto two coordinates, from
/// support values along evenly spaced directions.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub directions: Vec<[f64; 2]>,
    /// `+∞` marks an unbounded direction.
    pub supports: Vec<f64>,
    /// Vertex `j` is the intersection of support lines `j` and `j+1`; NaN when
    /// either is unbounded.
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolygonRow {
    direction_x: f64,
    direction_y: f64,
    support_value: f64,
    vertex_x: f64,
    vertex_y: f64,
}

impl Polygon {
    pub fn empty() -> Self {
        Self {
            directions: Vec::new(),
            supports: Vec::new(),
            vertices: Vec::new(),
        }
    }

    pub fn from_supports(directions: Vec<[f64; 2]>, supports: Vec<f64>) -> Self {
        let k = directions.len();
        let vertices = (0..k)
            .map(|j| {
                let (d0, d1) = (directions[j], directions[(j + 1) % k]);
                let (h0, h1) = (supports[j], supports[(j + 1) % k]);
                if !h0.is_finite() || !h1.is_finite() {
                    return [f64::NAN, f64::NAN];
                }
                let det = d0[0] * d1[1] - d0[1] * d1[0];
                [(h0 * d1[1] - h1 * d0[1]) / det, (d0[0] * h1 - d1[0] * h0) / det]
            })
            .collect();
        Self {
            directions,
            supports,
            vertices,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn is_bounded(&self) -> bool {
        self.supports.iter().all(|h| h.is_finite())
    }

    pub fn unbounded_directions(&self) -> Vec<[f64; 2]> {
        self.directions
            .iter()
            .zip(&self.supports)
            .filter(|(_, h)| !h.is_finite())
            .map(|(d, _)| *d)
            .collect()
    }

    /// Whether `pt` satisfies every support halfplane relaxed by `tol`.
    pub fn contains(&self, pt: [f64; 2], tol: f64) -> bool {
        self.directions
            .iter()
            .zip(&self.supports)
            .all(|(d, h)| d[0] * pt[0] + d[1] * pt[1] <= h + tol)
    }

    /// Whether every vertex of `other` lies in this polygon relaxed by `tol`.
    /// An empty polygon is contained in anything.
    pub fn contains_polygon(&self, other: &Polygon, tol: f64) -> bool {
        if other.is_empty() {
            return true;
        }
        if self.is_empty() || !other.is_bounded() && self.is_bounded() {
            return false;
        }
        other
            .vertices
            .iter()
            .filter(|v| v[0].is_finite() && v[1].is_finite())
            .all(|v| self.contains(*v, tol))
    }

    pub fn area(&self) -> f64 {
        if !self.is_bounded() {
            return f64::INFINITY;
        }
        let k = self.vertices.len();
        let twice: f64 = (0..k)
            .map(|j| {
                let (a, b) = (self.vertices[j], self.vertices[(j + 1) % k]);
                a[0] * b[1] - a[1] * b[0]
            })
            .sum();
        0.5 * twice.abs()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), GeometryError> {
        let mut wr = csv::Writer::from_writer(w);
        if self.is_empty() {
            wr.write_record(["direction_x", "direction_y", "support_value", "vertex_x", "vertex_y"])?;
        }
        for ((d, h), v) in self.directions.iter().zip(&self.supports).zip(&self.vertices) {
            wr.serialize(PolygonRow {
                direction_x: d[0],
                direction_y: d[1],
                support_value: *h,
                vertex_x: v[0],
                vertex_y: v[1],
            })?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, GeometryError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut directions = Vec::new();
        let mut supports = Vec::new();
        for row in rd.deserialize::<PolygonRow>() {
            let row = row?;
            directions.push([row.direction_x, row.direction_y]);
            supports.push(row.support_value);
        }
        Ok(Self::from_supports(directions, supports))
    }
}

/// Evenly spaced unit directions starting at the first axis.
pub fn directions(k: usize) -> Vec<[f64; 2]> {
    (0..k)
        .map(|j| {
            let t = 2.0 * PI * j as f64 / k as f64;
            let (s, c) = t.sin_cos();
            [if c.abs() < 1e-15 { 0.0 } else { c }, if s.abs() < 1e-15 { 0.0 } else { s }]
        })
        .collect()
}

pub fn project2d(
    p: &dyn SupportOracle,
    dims: (usize, usize),
    k: usize,
    solver: &Solver,
) -> Result<Polygon, GeometryError> {
    let n = p.dim();
    if k < 3 {
        return Err(GeometryError::Invalid(format!("need at least 3 directions, got {k}")));
    }
    if dims.0 >= n || dims.1 >= n || dims.0 == dims.1 {
        return Err(GeometryError::Invalid(format!("bad projection coordinates {dims:?} for dimension {n}")));
    }
    let dirs = directions(k);
    let mut supports = Vec::with_capacity(k);
    for d in &dirs {
        let mut full = vec![0.0; n];
        full[dims.0] = d[0];
        full[dims.1] = d[1];
        match p.support(&full, solver)? {
            Support::Bounded { value, .. } => supports.push(value),
            Support::Unbounded => supports.push(f64::INFINITY),
            Support::Empty => return Ok(Polygon::empty()),
        }
    }
    Ok(Polygon::from_supports(dirs, supports))
}
