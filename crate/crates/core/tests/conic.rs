use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safelearn::conic::*;

fn solver() -> Solver {
    Solver::default()
}

#[test]
fn solve_box_minimum() {
    let mut p = ConicProgram::new();
    let x = p.add_scalar("x");
    p.nonneg(x.expr());
    p.le(x.expr(), 1.0.into());
    p.minimize(x.expr());
    let s = solver().solve(&p).unwrap();
    assert_eq!(s.status, Status::Optimal);
    assert!(s.objective_value.abs() < 1e-7);
}

#[test]
fn solve_unbounded() {
    let mut p = ConicProgram::new();
    let x = p.add_scalar("x");
    p.nonneg(x.expr());
    p.maximize(x.expr());
    assert_eq!(solver().solve(&p).unwrap().status, Status::Unbounded);
}

#[test]
fn solve_infeasible() {
    let mut p = ConicProgram::new();
    let x = p.add_scalar("x");
    let c = p.add_scalar("c");
    p.le(x.expr(), (-1.0).into());
    p.nonneg(x.expr() - 1.0);
    p.minimize(c.expr());
    let s = solver().solve(&p).unwrap();
    assert_eq!(s.status, Status::Infeasible);
    assert!(matches!(s.into_optimal(), Err(ConicError::Infeasible)));
}

#[test]
fn maximize_reports_signed_values_and_duals() {
    // max x + 2y s.t. x + y ≤ 4, x ≤ 3, x,y ≥ 0  → (0,4), value 8
    let mut p = ConicProgram::new();
    let x = p.add_scalar("x");
    let y = p.add_scalar("y");
    let cap = p.le(x.expr() + y.expr(), 4.0.into());
    p.le(x.expr(), 3.0.into());
    p.nonneg(x.expr());
    p.nonneg(y.expr());
    p.maximize(x.expr() + y.expr() * 2.0);
    let s = solver().solve(&p).unwrap();
    assert!((s.objective_value - 8.0).abs() < 1e-6);
    assert!((s.dual_objective - 8.0).abs() < 1e-6);
    // shadow price of the shared capacity is 2
    assert!((s.dual(cap).as_slice()[0] - 2.0).abs() < 1e-6);
}

#[test]
fn psd_constraint_solves() {
    // max x s.t. [[1, x], [x, 1]] ⪰ 0 → x = 1
    let mut p = ConicProgram::new();
    let x = p.add_scalar("x");
    let mut blk = PsdBlock::new(2);
    blk.set(0, 0, 1.0.into());
    blk.set(0, 1, x.expr());
    blk.set(1, 1, 1.0.into());
    let id = p.psd(blk);
    p.maximize(x.expr());
    let s = solver().solve(&p).unwrap();
    assert!((s.objective_value - 1.0).abs() < 1e-6);
    match s.dual(id) {
        DualBlock::Matrix(z) => assert!(z.symmetric_eigenvalues().min() > -1e-7),
        _ => panic!("expected matrix dual"),
    }
    assert!((s.dual_objective - 1.0).abs() < 1e-6);
}

#[test]
fn capped_backend_refuses_psd() {
    let backend = CappedBackend {
        inner: ClarabelBackend,
        cap: Capability::SecondOrderCone,
    };
    let solver = Solver::new(Arc::new(backend), SolverSettings::default());
    let mut p = ConicProgram::new();
    let x = p.add_scalar("x");
    let mut blk = PsdBlock::new(1);
    blk.set(0, 0, x.expr());
    p.psd(blk);
    assert!(matches!(solver.solve(&p), Err(ConicError::Unsupported { .. })));
}

#[test]
fn quadratic_to_psd_examples() {
    let cases = [
        // a², (a-1)², a²-2a
        ((1.0, 0.0, 0.0), true, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0])),
        ((1.0, -2.0, 1.0), true, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])),
        ((1.0, -2.0, 0.0), false, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 1.0])),
    ];
    for ((qq, ql, r), psd, expected) in cases {
        let q = QuadraticForm::new(DMatrix::from_element(1, 1, qq), DVector::from_element(1, ql), r);
        let blk = quadratic_nonneg_to_psd(&AffineQuadratic::from_numeric(&q));
        let m = blk.value(&[]);
        assert_eq!(m, expected);
        let min_eig = m.symmetric_eigenvalues().min();
        assert_eq!(min_eig >= -1e-12, psd);
        // 1-D oracle: min_a q(a) = r - ql²/(4 qq)
        let qmin = r - ql * ql / (4.0 * qq);
        assert_eq!(qmin >= -1e-12, psd);
    }
}

#[test]
fn quadratic_to_psd_round_trip_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    for _ in 0..200 {
        let m = 3;
        let l = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let quad = &l * l.transpose();
        let lin = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        let r = rng.random_range(-0.5..2.0);
        let q = QuadraticForm::new(quad, lin, r);
        let blk = quadratic_nonneg_to_psd(&AffineQuadratic::from_numeric(&q));
        if blk.min_eigenvalue(&[]) < -1e-9 {
            continue;
        }
        checked += 1;
        for _ in 0..1000 {
            let a = DVector::from_fn(m, |_, _| rng.random_range(-10.0..10.0));
            assert!(q.eval(&a) >= -1e-8);
        }
    }
    assert!(checked > 10);
}

fn min_epigraph(x: &[f64], p: PNorm, d: u32) -> f64 {
    let mut prog = ConicProgram::new();
    let xs = prog.add_vector("x", x.len());
    for (v, val) in xs.iter().zip(x) {
        prog.eq(v.expr() - *val);
    }
    let exprs: Vec<LinExpr> = xs.iter().map(|v| v.expr()).collect();
    let (t, _) = pnorm_power_epigraph(&mut prog, &exprs, p, d).unwrap();
    prog.minimize(t.expr());
    let tight = Solver::with_settings(SolverSettings::default().with_feas_tol(1e-10).with_gap_tol(1e-10));
    tight.solve(&prog).unwrap().into_optimal().unwrap().objective_value
}

#[test]
fn pnorm_epigraph_examples() {
    assert!((min_epigraph(&[0.3, -2.0], PNorm::two(), 0) - 1.0).abs() < 1e-7);
    assert!((min_epigraph(&[3.0, 4.0], PNorm::two(), 1) - 5.0).abs() < 1e-6);
    assert!((min_epigraph(&[1.0, 1.0], PNorm::two(), 2) - 2.0).abs() < 1e-6);
    let mut prog = ConicProgram::new();
    assert!(pnorm_power_epigraph(&mut prog, &[], PNorm::Finite { num: 1, den: 2 }, 1).is_err());
}

#[test]
fn pnorm_epigraph_is_linear_where_expected() {
    for (p, d, cap) in [
        (PNorm::one(), 1, Capability::Linear),
        (PNorm::Infinity, 1, Capability::Linear),
        (PNorm::two(), 0, Capability::Linear),
        (PNorm::two(), 1, Capability::SecondOrderCone),
        (PNorm::Infinity, 2, Capability::SecondOrderCone),
    ] {
        let mut prog = ConicProgram::new();
        let xs = prog.add_vector("x", 3);
        let exprs: Vec<LinExpr> = xs.iter().map(|v| v.expr()).collect();
        pnorm_power_epigraph(&mut prog, &exprs, p, d).unwrap();
        assert_eq!(prog.required_capability(), cap, "p={p} d={d}");
    }
}

#[test]
fn pnorm_epigraph_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let norms = [
        PNorm::one(),
        PNorm::new(3, 2).unwrap(),
        PNorm::two(),
        PNorm::new(3, 1).unwrap(),
        PNorm::Infinity,
    ];
    for i in 0..100 {
        let p = norms[i % norms.len()];
        let d = (i / norms.len()) as u32 % 4;
        let len = 1 + i % 3;
        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
        let expected = p.norm_power(&x, d);
        let got = min_epigraph(&x, p, d);
        assert!(
            (got - expected).abs() <= 1e-6 * expected.max(1.0),
            "p={p} d={d} x={x:?}: {got} vs {expected}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    // strong duality on random bounded LPs
    #[test]
    fn lp_strong_duality(
        c in prop::collection::vec(-3.0f64..3.0, 3),
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..5),
        rhs in prop::collection::vec(0.1f64..2.0, 5),
    ) {
        let mut p = ConicProgram::new();
        let x = p.add_vector("x", 3);
        let ex: Vec<LinExpr> = x.iter().map(|v| v.expr()).collect();
        for v in &x {
            p.le(v.expr(), 1.0.into());
            p.nonneg(v.expr() + 1.0);
        }
        for (r, b) in rows.iter().zip(&rhs) {
            p.le(LinExpr::dot(r, &ex), (*b).into());
        }
        p.minimize(LinExpr::dot(&c, &ex));
        let s = solver().solve(&p).unwrap();
        prop_assert_eq!(s.status, Status::Optimal);
        prop_assert!((s.objective_value - s.dual_objective).abs() <= 1e-7);
    }
}
