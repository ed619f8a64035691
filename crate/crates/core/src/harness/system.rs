//! The hidden system queried by the learners.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conic::Solver;
use crate::error::LearnError;
use crate::geometry::{bounding_box, Polyhedron};
use crate::nonlinear_onestep::NonlinearUncertainty;

use super::expr::Expr;

/// `f⋆(x) = A⋆x + g⋆(x)`; `g⋆` absent means linear.
#[derive(Clone, Debug, PartialEq)]
pub struct TrueSystem {
    pub a_star: DMatrix<f64>,
    pub g_star: Option<Vec<Expr>>,
}

impl TrueSystem {
    pub fn new(a_star: DMatrix<f64>, g_star: Option<Vec<Expr>>) -> Result<Self, LearnError> {
        let n = a_star.nrows();
        if a_star.ncols() != n {
            return Err(LearnError::Invalid("A⋆ must be square".into()));
        }
        if let Some(g) = &g_star {
            if g.len() != n || g.iter().any(|e| e.dim() != n) {
                return Err(LearnError::Invalid(format!("g⋆ needs {n} expressions in {n} variables")));
            }
        }
        Ok(Self { a_star, g_star })
    }

    pub fn linear(a_star: DMatrix<f64>) -> Self {
        Self { a_star, g_star: None }
    }

    pub fn dim(&self) -> usize {
        self.a_star.nrows()
    }

    pub fn g(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.g_star {
            None => DVector::zeros(self.dim()),
            Some(g) => DVector::from_iterator(self.dim(), g.iter().map(|e| e.eval(x.as_slice()))),
        }
    }

    pub fn step(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a_star * x + self.g(x)
    }

    /// Successors `f⋆(x), …` up to `horizon`.
    pub fn observe(&self, x: &DVector<f64>, horizon: usize) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(horizon);
        let mut cur = x.clone();
        for _ in 0..horizon {
            cur = self.step(&cur);
            out.push(cur.clone());
        }
        out
    }

    /// Checks `‖g⋆(x)‖_∞ ≤ γ‖x‖_p^d` at `samples` random points of `S`.
    pub fn validate_g(&self, s: &Polyhedron, u: &NonlinearUncertainty, samples: usize, seed: u64) -> Result<(), LearnError> {
        if self.g_star.is_none() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for x in sample_in(s, samples, &mut rng, &Solver::default())? {
            let g = self.g(&x);
            let bound = u.g_bound(x.as_slice());
            let size = g.amax();
            if !(size <= bound * (1.0 + 1e-12) + 1e-12) {
                return Err(LearnError::Invalid(format!(
                    "g⋆ violates its bound at x = {:?}: ‖g⋆(x)‖∞ = {size:e} > {bound:e}",
                    x.as_slice()
                )));
            }
        }
        Ok(())
    }
}

/// Uniform points of a bounded polyhedron by rejection from its bounding box.
pub fn sample_in(s: &Polyhedron, count: usize, rng: &mut impl Rng, solver: &Solver) -> Result<Vec<DVector<f64>>, LearnError> {
    let (lo, hi) = bounding_box(&s.lifted(), solver)?.ok_or_else(|| LearnError::Infeasible("safety region is empty".into()))?;
    if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
        return Err(LearnError::Invalid("sampling needs a bounded safety region".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * count.max(1) {
            return Err(LearnError::Invalid("safety region is too thin to sample".into()));
        }
        let x = DVector::from_fn(s.dim(), |i, _| if lo[i] < hi[i] { rng.random_range(lo[i]..=hi[i]) } else { lo[i] });
        if s.contains(&x, 0.0)? {
            out.push(x);
        }
    }
    Ok(out)
}
