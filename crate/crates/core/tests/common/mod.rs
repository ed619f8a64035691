//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safelearn::geometry::LiftedPolyhedron;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            go(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, m, k, &mut Vec::new(), &mut out);
    out
}

/// Vertices of `{z | G z ≤ h, E z = f}` by solving every square subsystem of
/// active constraints. Assumes the polyhedron is bounded.
pub fn vertices(g: &DMatrix<f64>, h: &DVector<f64>, e: &DMatrix<f64>, f: &DVector<f64>) -> Vec<DVector<f64>> {
    let dim = g.ncols();
    let neq = e.nrows();
    let mut out: Vec<DVector<f64>> = Vec::new();
    if neq > dim {
        return out;
    }
    for act in combinations(g.nrows(), dim - neq) {
        let m = DMatrix::from_fn(dim, dim, |i, j| if i < neq { e[(i, j)] } else { g[(act[i - neq], j)] });
        let rhs = DVector::from_fn(dim, |i, _| if i < neq { f[i] } else { h[act[i - neq]] });
        let svd = m.clone().svd(true, true);
        if svd.singular_values.min() < 1e-10 * svd.singular_values.max().max(1.0) {
            continue;
        }
        let z = m.lu().solve(&rhs).unwrap();
        let ok_ineq = (g * &z - h).iter().all(|v| *v <= 1e-9);
        let ok_eq = (e * &z - f).iter().all(|v| v.abs() <= 1e-9);
        if ok_ineq && ok_eq && !out.iter().any(|w| (w - &z).amax() < 1e-9) {
            out.push(z);
        }
    }
    out
}

/// Vertices of a lifted polyhedron projected onto `x` (may contain
/// non-extreme points of the projection, which is harmless for the oracles).
pub fn projected_vertices(p: &LiftedPolyhedron) -> Vec<DVector<f64>> {
    let n = p.dim();
    let g = DMatrix::from_fn(p.a.nrows(), n + p.lifted_dim(), |i, j| {
        if j < n {
            p.a[(i, j)]
        } else {
            p.b[(i, j - n)]
        }
    });
    let e = DMatrix::from_fn(p.a_eq.nrows(), n + p.lifted_dim(), |i, j| {
        if j < n {
            p.a_eq[(i, j)]
        } else {
            p.b_eq[(i, j - n)]
        }
    });
    vertices(&g, &p.c, &e, &p.c_eq)
        .into_iter()
        .map(|z| z.rows(0, n).into_owned())
        .collect()
}

pub fn rank(rows: &[DVector<f64>], tol: f64) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let m = DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]);
    let sv = m.singular_values();
    let max = sv.max();
    if max < tol {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * max).count()
}

/// Random bounded lifted polyhedron in ℝ² with at most `max_facets`
/// inequality rows. Some instances are flattened to segments or points.
pub fn random_lifted_2d(r: &mut impl Rng, max_facets: usize) -> LiftedPolyhedron {
    let p = r.random_range(0..2usize);
    let dim = 2 + p;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    // bounding box on all coordinates keeps the oracle valid
    for j in 0..dim {
        let (lo, hi): (f64, f64) = (r.random_range(-1.5..0.5), r.random_range(-0.5..1.5));
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let mut up = vec![0.0; dim];
        up[j] = 1.0;
        rows.push(up.clone());
        rhs.push(hi);
        up[j] = -1.0;
        rows.push(up);
        rhs.push(-lo);
    }
    let kind = r.random_range(0..4);
    while rows.len() < max_facets {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let b = r.random_range(-0.3..1.0);
        rows.push(v);
        rhs.push(b);
    }
    let mut eq_rows: Vec<Vec<f64>> = Vec::new();
    let mut eq_rhs: Vec<f64> = Vec::new();
    if kind >= 2 {
        // flatten: one or two equality rows through x
        for _ in 0..(kind - 1) {
            let v: Vec<f64> = (0..dim).map(|j| if j < 2 { r.random_range(-1.0..1.0) } else { 0.0 }).collect();
            eq_rows.push(v);
            eq_rhs.push(r.random_range(-0.2..0.2));
        }
    }
    let a = DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]);
    let b = DMatrix::from_fn(rows.len(), p, |i, j| rows[i][2 + j]);
    let c = DVector::from_vec(rhs);
    let lp = LiftedPolyhedron::new(a, b, c).unwrap();
    if eq_rows.is_empty() {
        return lp;
    }
    let ae = DMatrix::from_fn(eq_rows.len(), 2, |i, j| eq_rows[i][j]);
    let be = DMatrix::zeros(eq_rows.len(), p);
    lp.with_equalities(ae, be, DVector::from_vec(eq_rhs)).unwrap()
}

/// A random box around the origin, widths in [0.5, 2].
pub fn random_box_polyhedron(r: &mut impl Rng) -> safelearn::geometry::Polyhedron {
    let lo: Vec<f64> = (0..2).map(|_| -r.random_range(0.5..2.0)).collect();
    let hi: Vec<f64> = (0..2).map(|_| r.random_range(0.5..2.0)).collect();
    safelearn::geometry::Polyhedron::boxed(&lo, &hi).unwrap()
}
