//! Standard conic rewrites: global nonnegativity of a quadratic as an LMI, and
//! epigraphs of powers of rational p-norms as second-order cone towers.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::expr::{LinExpr, Var};
use super::program::{ConicProgram, ConstraintId, PsdBlock};
use super::ConicError;

/// `a ↦ aᵀQa + qᵀa + r` with numeric coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticForm {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl QuadraticForm {
    pub fn new(quad: DMatrix<f64>, lin: DVector<f64>, constant: f64) -> Self {
        assert_eq!(quad.nrows(), quad.ncols(), "quadratic part must be square");
        assert_eq!(quad.nrows(), lin.len(), "linear part has wrong length");
        let quad = (&quad + quad.transpose()) * 0.5;
        Self { quad, lin, constant }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn eval(&self, a: &DVector<f64>) -> f64 {
        (a.transpose() * &self.quad * a)[(0, 0)] + self.lin.dot(a) + self.constant
    }

    /// The `(m+1)×(m+1)` matrix `[[r, qᵀ/2], [q/2, Q]]`.
    pub fn gram(&self) -> DMatrix<f64> {
        let m = self.dim();
        let mut g = DMatrix::zeros(m + 1, m + 1);
        g[(0, 0)] = self.constant;
        for i in 0..m {
            g[(0, i + 1)] = self.lin[i] / 2.0;
            g[(i + 1, 0)] = self.lin[i] / 2.0;
            for j in 0..m {
                g[(i + 1, j + 1)] = self.quad[(i, j)];
            }
        }
        g
    }

    pub fn min_quad_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return f64::INFINITY;
        }
        self.quad
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Pullback through the affine map `a = anchor + basis·â`.
    pub fn compose_affine(&self, anchor: &DVector<f64>, basis: &DMatrix<f64>) -> QuadraticForm {
        let quad = basis.transpose() * &self.quad * basis;
        let lin = basis.transpose() * (&self.quad * anchor * 2.0 + &self.lin);
        QuadraticForm::new(quad, lin, self.eval(anchor))
    }
}

/// Quadratic in `a` whose coefficients are affine in decision variables.
#[derive(Clone, Debug)]
pub struct AffineQuadratic {
    /// Row-major `m×m`, symmetric.
    pub quad: Vec<LinExpr>,
    pub lin: Vec<LinExpr>,
    pub constant: LinExpr,
}

impl AffineQuadratic {
    pub fn zero(m: usize) -> Self {
        Self {
            quad: vec![LinExpr::zero(); m * m],
            lin: vec![LinExpr::zero(); m],
            constant: LinExpr::zero(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn from_numeric(q: &QuadraticForm) -> Self {
        Self::scaled(q, &LinExpr::constant(1.0))
    }

    /// `λ·q` for a scalar variable `λ`.
    pub fn scaled_by(q: &QuadraticForm, lambda: Var) -> Self {
        Self::scaled(q, &lambda.expr())
    }

    fn scaled(q: &QuadraticForm, s: &LinExpr) -> Self {
        let m = q.dim();
        let mut out = Self::zero(m);
        for i in 0..m {
            for j in 0..m {
                out.quad[i * m + j] = s.clone() * q.quad[(i, j)];
            }
            out.lin[i] = s.clone() * q.lin[i];
        }
        out.constant = s.clone() * q.constant;
        out
    }

    pub fn sub_assign(&mut self, other: &AffineQuadratic) {
        assert_eq!(self.dim(), other.dim());
        for (a, b) in self.quad.iter_mut().zip(&other.quad) {
            *a -= b;
        }
        for (a, b) in self.lin.iter_mut().zip(&other.lin) {
            *a -= b;
        }
        self.constant -= &other.constant;
    }

    /// Numeric form at a primal point.
    pub fn at(&self, x: &[f64]) -> QuadraticForm {
        let m = self.dim();
        QuadraticForm::new(
            DMatrix::from_fn(m, m, |i, j| self.quad[i * m + j].eval(x)),
            DVector::from_fn(m, |i, _| self.lin[i].eval(x)),
            self.constant.eval(x),
        )
    }
}

/// `q(a) ≥ 0 ∀a` ⇔ `[[r, qᵀ/2], [q/2, Q]] ⪰ 0`. Affine coefficients give an LMI.
pub fn quadratic_nonneg_to_psd(q: &AffineQuadratic) -> PsdBlock {
    let m = q.dim();
    let mut blk = PsdBlock::new(m + 1);
    blk.set(0, 0, q.constant.clone());
    for i in 0..m {
        blk.set(0, i + 1, q.lin[i].clone() * 0.5);
        for j in i..m {
            let e = (q.quad[i * m + j].clone() + q.quad[j * m + i].clone()) * 0.5;
            blk.set(i + 1, j + 1, e);
        }
    }
    blk
}

/// Exponent of a p-norm: a rational `num/den ≥ 1` or `∞`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PNorm {
    Finite { num: u32, den: u32 },
    Infinity,
}

impl PNorm {
    pub fn new(num: u32, den: u32) -> Result<Self, ConicError> {
        if den == 0 || num < den {
            return Err(ConicError::Malformed(format!("p-norm exponent {num}/{den} is below 1")));
        }
        let g = gcd(num, den);
        Ok(PNorm::Finite { num: num / g, den: den / g })
    }

    pub fn one() -> Self {
        PNorm::Finite { num: 1, den: 1 }
    }

    pub fn two() -> Self {
        PNorm::Finite { num: 2, den: 1 }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            PNorm::Finite { num, den } => num as f64 / den as f64,
            PNorm::Infinity => f64::INFINITY,
        }
    }

    /// Numeric `‖x‖_p`.
    pub fn norm(&self, x: &[f64]) -> f64 {
        match *self {
            PNorm::Infinity => x.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            PNorm::Finite { num: 1, den: 1 } => x.iter().map(|v| v.abs()).sum(),
            PNorm::Finite { num: 2, den: 1 } => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
            _ => {
                let p = self.as_f64();
                x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
            }
        }
    }

    /// Numeric `‖x‖_p^d` with `‖x‖⁰ = 1`.
    pub fn norm_power(&self, x: &[f64], d: u32) -> f64 {
        if d == 0 {
            1.0
        } else {
            self.norm(x).powi(d as i32)
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::Infinity => write!(f, "inf"),
            PNorm::Finite { num, den: 1 } => write!(f, "{num}"),
            PNorm::Finite { num, den } => write!(f, "{num}/{den}"),
        }
    }
}

impl FromStr for PNorm {
    type Err = ConicError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(PNorm::Infinity);
        }
        let bad = || ConicError::Malformed(format!("cannot parse p-norm exponent {s:?}"));
        match s.split_once('/') {
            Some((a, b)) => PNorm::new(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => PNorm::new(s.parse().map_err(|_| bad())?, 1),
        }
    }
}

impl TryFrom<String> for PNorm {
    type Error = ConicError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PNorm> for String {
    fn from(p: PNorm) -> String {
        p.to_string()
    }
}

/// Adds `t ≥ ‖x‖_p^d` to `program` and returns `t` with the new blocks.
///
/// `d = 0` gives `t ≥ 1`; `p ∈ {1, ∞}` with `d = 1` stays linear; every other
/// case is a tower of second-order cones.
pub fn pnorm_power_epigraph(
    program: &mut ConicProgram,
    x: &[LinExpr],
    p: PNorm,
    d: u32,
) -> Result<(Var, Vec<ConstraintId>), ConicError> {
    if let PNorm::Finite { num, den } = p {
        if den == 0 || num < den {
            return Err(ConicError::Malformed(format!("p-norm exponent {p} is below 1")));
        }
    }
    let t = program.add_scalar("t_norm_power");
    let mut ids = Vec::new();
    if d == 0 {
        ids.push(program.nonneg(t.expr() - 1.0));
        return Ok((t, ids));
    }
    let s = if d == 1 { t } else { program.add_scalar("s_norm") };
    norm_epigraph(program, x, p, s, &mut ids);
    if d > 1 {
        // s ≤ t^{1/d} · 1^{(d-1)/d}
        geo_mean_le(
            program,
            s.expr(),
            &[(t.expr(), 1), (LinExpr::constant(1.0), d - 1)],
            &mut ids,
        );
    }
    Ok((t, ids))
}

fn norm_epigraph(program: &mut ConicProgram, x: &[LinExpr], p: PNorm, s: Var, ids: &mut Vec<ConstraintId>) {
    match p {
        PNorm::Infinity => {
            for e in x {
                ids.push(program.nonneg(s.expr() - e.clone()));
                ids.push(program.nonneg(s.expr() + e.clone()));
            }
            ids.push(program.nonneg(s.expr()));
        }
        PNorm::Finite { num: 1, den: 1 } => {
            let u = program.add_vector("u_abs", x.len());
            for (e, ui) in x.iter().zip(&u) {
                ids.push(program.nonneg(ui.expr() - e.clone()));
                ids.push(program.nonneg(ui.expr() + e.clone()));
            }
            let total = LinExpr::sum(u.iter().map(|v| v.expr()).collect::<Vec<_>>().iter());
            ids.push(program.nonneg(s.expr() - total));
        }
        PNorm::Finite { num: 2, den: 1 } => {
            ids.push(program.soc(s.expr(), x.to_vec()));
        }
        PNorm::Finite { num, den } => {
            // ‖x‖_p ≤ s ⇔ ∃ r ≥ 0: |xᵢ| ≤ rᵢ^{1/p} s^{1-1/p}, Σ rᵢ ≤ s
            let u = program.add_vector("u_abs", x.len());
            let r = program.add_vector("r_pow", x.len());
            for ((e, ui), ri) in x.iter().zip(&u).zip(&r) {
                ids.push(program.nonneg(ui.expr() - e.clone()));
                ids.push(program.nonneg(ui.expr() + e.clone()));
                ids.push(program.nonneg(ri.expr()));
                geo_mean_le(program, ui.expr(), &[(ri.expr(), den), (s.expr(), num - den)], ids);
            }
            let total = LinExpr::sum(r.iter().map(|v| v.expr()).collect::<Vec<_>>().iter());
            ids.push(program.nonneg(s.expr() - total));
        }
    }
}

/// `w ≤ Π fⱼ^{kⱼ/q}` with `q = Σ kⱼ`, for nonnegative `w`.
///
/// Leaves are padded with `w` up to the next power of two and reduced through
/// rotated cones `m² ≤ a·b`, written as `‖(2m, a−b)‖ ≤ a+b`.
fn geo_mean_le(program: &mut ConicProgram, w: LinExpr, factors: &[(LinExpr, u32)], ids: &mut Vec<ConstraintId>) {
    let q: u32 = factors.iter().map(|f| f.1).sum();
    assert!(q >= 1);
    if q == 1 {
        let f = factors.iter().find(|f| f.1 == 1).unwrap();
        ids.push(program.nonneg(f.0.clone() - w));
        return;
    }
    let width = q.next_power_of_two();
    let mut level: Vec<LinExpr> = Vec::with_capacity(width as usize);
    for (f, k) in factors {
        for _ in 0..*k {
            level.push(f.clone());
        }
    }
    for _ in q..width {
        level.push(w.clone());
    }
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let m = program.add_scalar("geo_mean_node");
            ids.push(program.soc(
                a.clone() + b.clone(),
                vec![m.expr() * 2.0, a.clone() - b.clone()],
            ));
            next.push(m.expr());
        }
        level = next;
    }
    ids.push(program.nonneg(level.pop().unwrap() - w));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_layout() {
        // q(a) = a² − 2a
        let q = QuadraticForm::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, -2.0), 0.0);
        let g = q.gram();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 1.0]));
        let blk = quadratic_nonneg_to_psd(&AffineQuadratic::from_numeric(&q));
        assert_eq!(blk.value(&[]), g);
    }

    #[test]
    fn pnorm_parsing() {
        assert_eq!("3/2".parse::<PNorm>().unwrap(), PNorm::Finite { num: 3, den: 2 });
        assert_eq!("4/2".parse::<PNorm>().unwrap(), PNorm::two());
        assert_eq!("inf".parse::<PNorm>().unwrap(), PNorm::Infinity);
        assert!("1/2".parse::<PNorm>().is_err());
        assert!("x".parse::<PNorm>().is_err());
        assert_eq!(PNorm::new(3, 2).unwrap().to_string(), "3/2");
    }

    #[test]
    fn numeric_norms() {
        let x = [3.0, -4.0];
        assert_eq!(PNorm::one().norm(&x), 7.0);
        assert_eq!(PNorm::two().norm(&x), 5.0);
        assert_eq!(PNorm::Infinity.norm(&x), 4.0);
        assert_eq!(PNorm::two().norm_power(&x, 0), 1.0);
    }

    #[test]
    fn compose_affine_matches_direct_evaluation() {
        let q = QuadraticForm::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DVector::from_vec(vec![1.0, -1.0]),
            -3.0,
        );
        let anchor = DVector::from_vec(vec![0.5, 2.0]);
        let basis = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let qh = q.compose_affine(&anchor, &basis);
        for t in [-2.0, 0.0, 0.7, 3.0] {
            let a = &anchor + &basis * DVector::from_element(1, t);
            assert!((qh.eval(&DVector::from_element(1, t)) - q.eval(&a)).abs() < 1e-12);
        }
    }
}
