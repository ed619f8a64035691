use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

/// Index of a scalar decision variable inside a [`super::ConicProgram`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn expr(self) -> LinExpr {
        LinExpr::var(self)
    }
}

/// Affine expression `Σ aᵢ·xᵢ + c` over program variables.
///
/// Terms are kept unsorted and may repeat; repeated entries are summed when the
/// program is assembled for a backend.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: Var) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: Var, coef: f64) -> Self {
        Self {
            terms: vec![(v, coef)],
            constant: 0.0,
        }
    }

    pub fn add_term(&mut self, v: Var, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    pub fn add_scaled(&mut self, other: &LinExpr, scale: f64) {
        if scale == 0.0 {
            return;
        }
        self.terms
            .extend(other.terms.iter().map(|&(v, a)| (v, a * scale)));
        self.constant += other.constant * scale;
    }

    /// Dot product of a coefficient slice with a slice of expressions.
    pub fn dot(coefs: &[f64], exprs: &[LinExpr]) -> LinExpr {
        assert_eq!(coefs.len(), exprs.len(), "dot: length mismatch");
        let mut out = LinExpr::zero();
        for (c, e) in coefs.iter().zip(exprs) {
            out.add_scaled(e, *c);
        }
        out
    }

    pub fn sum<'a>(exprs: impl IntoIterator<Item = &'a LinExpr>) -> LinExpr {
        let mut out = LinExpr::zero();
        for e in exprs {
            out.add_scaled(e, 1.0);
        }
        out
    }

    pub fn eval(&self, values: &[f64]) -> f64 {
        self.terms
            .iter()
            .fold(self.constant, |acc, &(v, a)| acc + a * values[v.0])
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|&(_, a)| a == 0.0)
    }

    pub fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(|(v, _)| v.0).max()
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        LinExpr::constant(c)
    }
}

impl From<Var> for LinExpr {
    fn from(v: Var) -> Self {
        LinExpr::var(v)
    }
}

impl AddAssign<&LinExpr> for LinExpr {
    fn add_assign(&mut self, rhs: &LinExpr) {
        self.add_scaled(rhs, 1.0);
    }
}

impl SubAssign<&LinExpr> for LinExpr {
    fn sub_assign(&mut self, rhs: &LinExpr) {
        self.add_scaled(rhs, -1.0);
    }
}

impl Add for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: LinExpr) -> LinExpr {
        self += &rhs;
        self
    }
}

impl Sub for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: LinExpr) -> LinExpr {
        self -= &rhs;
        self
    }
}

impl Add<f64> for LinExpr {
    type Output = LinExpr;
    fn add(mut self, rhs: f64) -> LinExpr {
        self.constant += rhs;
        self
    }
}

impl Sub<f64> for LinExpr {
    type Output = LinExpr;
    fn sub(mut self, rhs: f64) -> LinExpr {
        self.constant -= rhs;
        self
    }
}

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(mut self, rhs: f64) -> LinExpr {
        for t in &mut self.terms {
            t.1 *= rhs;
        }
        self.constant *= rhs;
        self
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_and_eval() {
        let x = Var(0);
        let y = Var(1);
        let e = (LinExpr::term(x, 2.0) - LinExpr::var(y)) * 3.0 + 1.0;
        assert_eq!(e.eval(&[1.0, 4.0]), 3.0 * (2.0 - 4.0) + 1.0);
        let d = LinExpr::dot(&[1.0, -1.0], &[x.expr(), y.expr()]);
        assert_eq!(d.eval(&[5.0, 2.0]), 3.0);
        assert!(LinExpr::constant(4.0).is_constant());
    }
}
