mod common;

use std::time::Instant;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

use safelearn::conic::{Capability, CappedBackend, ClarabelBackend, QuadraticForm, Solver, SolverSettings};
use safelearn::geometry::Polyhedron;
use safelearn::linear_onestep::{onestep_region, MatrixPolytope, MeasurementSet};
use safelearn::linear_twostep::*;
use safelearn::LearnError;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn example_a_star() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[2.0, 1.0, 4.0, 2.0, 2.0, -3.0, -1.0, -2.0, -2.0, -3.0, 1.0, 0.0, 2.0, 0.0, -2.0, 2.0],
    )
}

fn example_a0() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            2.25, 0.75, 4.25, 1.75, 2.25, -3.25, -1.25, -2.25, -2.0, -2.75, 1.25, 0.0, 1.75, -0.25, -2.0, 2.0,
        ],
    )
}

/// (a − 1.5)² ≤ 0.25
fn interval_prior() -> EllipsoidalMatrixUncertainty {
    let q = QuadraticForm::new(DMatrix::from_element(1, 1, 1.0), dv(&[-3.0]), 2.0);
    EllipsoidalMatrixUncertainty::general(1, q).unwrap()
}

#[test]
fn one_dimensional_sdp_optimum() {
    let s = Solver::default();
    let q = solve_twostep(&Polyhedron::unit_box(1), &interval_prior(), &TwoStepData::new(1), &dv(&[-1.0]), DEFAULT_STRICT_TOL, &s)
        .unwrap();
    assert!((q.x[0] - 0.25).abs() < 1e-5, "{}", q.x[0]);
    assert!((q.value + 0.25).abs() < 1e-5);
    assert!(q.certificate.lambda1.iter().chain(&q.certificate.lambda2).all(|l| *l >= -1e-8));
    assert!(q.certificate.min_eigenvalues.iter().all(|e| *e >= -1e-6));
}

/// Closed form for n = 1 with a ∈ [lo, hi], S = [−1, 1]: |x| ≤ 1 / max(1, |a|, a²).
#[test]
fn one_dimensional_closed_form_sweep() {
    let s = Solver::default();
    for (lo, hi) in [(1.0, 2.0), (-0.5, 0.5), (-3.0, -1.0), (0.2, 0.9), (-1.4, 0.3)] {
        let mid: f64 = 0.5 * (lo + hi);
        let r: f64 = 0.5 * (hi - lo);
        let q = QuadraticForm::new(DMatrix::from_element(1, 1, 1.0), dv(&[-2.0 * mid]), mid * mid - r * r);
        let u0 = EllipsoidalMatrixUncertainty::general(1, q).unwrap();
        let amax = f64::max(lo.abs(), hi.abs());
        let expect = 1.0 / amax.max(amax * amax).max(1.0);
        for c in [-1.0, 1.0] {
            let got = solve_twostep(&Polyhedron::unit_box(1), &u0, &TwoStepData::new(1), &dv(&[c]), DEFAULT_STRICT_TOL, &s)
                .unwrap();
            assert!((got.value + expect).abs() < 1e-4, "[{lo},{hi}] c={c}: {} vs {}", got.value, -expect);
        }
    }
}

#[test]
fn one_dimensional_learning() {
    let s = Solver::default();
    let mut calls = Vec::new();
    let mut oracle = |x: &DVector<f64>| {
        calls.push(x[0]);
        (x * 2.0, x * 4.0)
    };
    let out = learn_two_step(&Polyhedron::unit_box(1), &interval_prior(), &dv(&[-1.0]), TwostepOptions::default(), &mut oracle, &s)
        .unwrap();
    let a = out.learned().expect("learned");
    assert!((a[(0, 0)] - 2.0).abs() < 1e-9);
    assert_eq!(out.measurements_used, 1);
    assert!((calls[0] - 0.25).abs() < 1e-5);
    assert!((out.steps[0].observed[1][0] - 1.0).abs() < 1e-4);
}

#[test]
fn tight_ball_learns_without_queries() {
    let s = Solver::default();
    let a = example_a_star();
    let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(a.clone(), 1e-6).unwrap();
    let mut oracle = |_: &DVector<f64>| -> (DVector<f64>, DVector<f64>) { panic!("no query expected") };
    let out = learn_two_step(&Polyhedron::unit_box(4), &u0, &dv(&[-1.0, 0.0, 0.0, 0.0]), TwostepOptions::default(), &mut oracle, &s)
        .unwrap();
    assert_eq!(out.measurements_used, 0);
    assert!((out.learned().unwrap() - &a).norm() <= 1e-6);
    // the SDP itself refuses to build without a strict interior point
    assert!(matches!(
        build_twostep_sdp(&Polyhedron::unit_box(4), &u0, &TwoStepData::new(4), &dv(&[1.0, 0.0, 0.0, 0.0]), DEFAULT_STRICT_TOL),
        Err(LearnError::StrictInterior(_))
    ));
}

#[test]
fn small_ball_approaches_nominal_safe_set() {
    let s = Solver::default();
    let a0 = DMatrix::from_row_slice(2, 2, &[0.3, 0.8, -0.6, 0.4]);
    let sp = Polyhedron::unit_box(2);
    let gamma = 1e-3;
    let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(a0.clone(), gamma).unwrap();
    for c in [[-1.0, 0.0], [0.0, -1.0], [0.7, 0.7], [1.0, -0.3]] {
        let c = dv(&c);
        let q = solve_twostep(&sp, &u0, &TwoStepData::new(2), &c, DEFAULT_STRICT_TOL, &s).unwrap();
        // min cᵀx over x, A₀x, A₀²x ∈ S
        let nominal = twostep_cost_lower_bound(&sp, &a0, &c, 1, &s).unwrap();
        assert!(q.value >= nominal - 1e-6, "{} < {}", q.value, nominal);
        assert!(q.value - nominal < 20.0 * gamma * c.norm(), "{} vs {}", q.value, nominal);
    }
}

/// Uniform samples from {â | q̂(â) ≤ 0}.
fn sample_ellipsoid(qhat: &QuadraticForm, count: usize, r: &mut impl Rng) -> Vec<DVector<f64>> {
    let m = qhat.dim();
    let chol = qhat.quad.clone().cholesky().unwrap();
    let center = chol.solve(&qhat.lin) * -0.5;
    let rho = -qhat.eval(&center);
    let l_t = chol.l().transpose();
    (0..count)
        .map(|_| {
            let g: DVector<f64> = DVector::from_fn(m, |_, _| StandardNormal.sample(r));
            let radius = r.random::<f64>().powf(1.0 / m as f64);
            // boundary points are the hardest case; put a quarter of the samples there
            let radius = if r.random::<f64>() < 0.25 { 1.0 } else { radius };
            let u = g.normalize() * radius * rho.sqrt();
            &center + l_t.clone().solve_upper_triangular(&u).unwrap()
        })
        .collect()
}

fn check_certificate(sp: &Polyhedron, u0: &EllipsoidalMatrixUncertainty, data: &TwoStepData, c: &DVector<f64>, seed: u64) {
    let s = Solver::default();
    let sdp = build_twostep_sdp(sp, u0, data, c, DEFAULT_STRICT_TOL).unwrap();
    let sol = s.solve(&sdp.program).unwrap().into_optimal().unwrap();
    let cert = sdp.certificate(&sol);
    assert!(cert.min_eigenvalues.iter().all(|e| *e >= -1e-6), "{:?}", cert.min_eigenvalues);
    assert!(cert.lambda1.iter().chain(&cert.lambda2).all(|l| *l >= -1e-8));
    let x = DVector::from_vec(sol.vars(&sdp.x));
    let mut r = common::rng(seed);
    for a in sample_ellipsoid(&sdp.qhat, 1000, &mut r) {
        let g = sdp.param.eval(&a);
        let y = &g * &x;
        let z = &g * &y;
        for h in sp.halfspaces() {
            assert!(h.normal.dot(&y) <= h.offset + 1e-5);
            assert!(h.normal.dot(&z) <= h.offset + 1e-5);
        }
    }
}

#[test]
fn certificate_validity_by_sampling() {
    let a = example_a_star();
    let sp = Polyhedron::unit_box(4);
    let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(example_a0(), 1.0).unwrap();
    let c = dv(&[-1.0, 0.0, 0.0, 0.0]);
    check_certificate(&sp, &u0, &TwoStepData::new(4), &c, 1);

    // after one trajectory (n̂ = 8)
    let x = dv(&[0.05, 0.0, 0.0, 0.0]);
    let mut d = TwoStepData::new(4);
    d.push(x.clone(), &a * &x, &a * &a * &x).unwrap();
    check_certificate(&sp, &u0, &d, &c, 2);

    let mut r = common::rng(3);
    for seed in 0..4 {
        let a0 = DMatrix::from_fn(2, 2, |_, _| r.random_range(-1.0..1.0));
        let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(a0, r.random_range(0.1..0.6)).unwrap();
        let c = dv(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
        check_certificate(&Polyhedron::unit_box(2), &u0, &TwoStepData::new(2), &c, 10 + seed);
    }
}

#[test]
fn two_step_safe_points_are_one_step_safe() {
    let s = Solver::default();
    let a0 = DMatrix::from_row_slice(2, 2, &[0.5, -0.4, 0.9, 0.1]);
    let gamma = 0.3;
    let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(a0.clone(), gamma).unwrap();
    // entrywise box of half-width γ/2 sits inside the Frobenius ball
    let inner = MatrixPolytope::entrywise(&a0.map(|v| v - gamma / 2.0), &a0.map(|v| v + gamma / 2.0)).unwrap();
    let sp = Polyhedron::unit_box(2);
    let (region, _) = onestep_region(&sp, &inner, &MeasurementSet::new(2)).unwrap();
    for c in [[-1.0, 0.0], [0.0, 1.0], [0.6, -0.8], [-0.3, -0.9]] {
        let q = solve_twostep(&sp, &u0, &TwoStepData::new(2), &dv(&c), DEFAULT_STRICT_TOL, &s).unwrap();
        assert!(region.contains(&q.x, 1e-6, &s).unwrap());
        let mut r = common::rng(5);
        for _ in 0..200 {
            let d = DMatrix::from_fn(2, 2, |_, _| r.random_range(-1.0..1.0));
            let a = &a0 + d.normalize() * (gamma * r.random::<f64>());
            assert!(sp.max_violation(&(&a * &q.x)).unwrap() <= 1e-6);
        }
    }
}

#[test]
fn earlier_queries_stay_feasible() {
    let s = Solver::default();
    let a = example_a_star();
    let sp = Polyhedron::unit_box(4);
    let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(example_a0(), 1.0).unwrap();
    let c = dv(&[-1.0, 0.0, 0.0, 0.0]);
    let x1 = solve_twostep(&sp, &u0, &TwoStepData::new(4), &c, DEFAULT_STRICT_TOL, &s).unwrap().x;
    let mut d = TwoStepData::new(4);
    d.push(x1.clone(), &a * &x1, &a * &a * &x1).unwrap();
    // x₁ stays feasible: pin it with the cost −x₁ direction and compare
    let q = solve_twostep(&sp, &u0, &d, &(-&x1), DEFAULT_STRICT_TOL, &s).unwrap();
    assert!(q.value <= -x1.norm_squared() + 1e-6);
}

#[test]
fn example_instance() {
    let s = Solver::default();
    let started = Instant::now();
    let a = example_a_star();
    let sp = Polyhedron::unit_box(4);
    let u0 = EllipsoidalMatrixUncertainty::frobenius_ball(example_a0(), 1.0).unwrap();
    assert!(u0.contains(&a, 0.0));
    let c = dv(&[-1.0, 0.0, 0.0, 0.0]);
    let out = learn_two_step(&sp, &u0, &c, TwostepOptions::default(), &mut |x| (&a * x, &a * &a * x), &s).unwrap();
    let learned = out.learned().expect("learned");
    assert!((learned - &a).norm() <= 1e-6);
    assert_eq!(out.measurements_used, 2);
    let first = out.steps[0].step_cost;
    assert!((first + 0.05495).abs() < 1e-4, "first {first}");
    let dirs: Vec<DVector<f64>> = out.steps.iter().flat_map(|st| [dv(&st.x), dv(&st.observed[0])]).collect();
    assert_eq!(common::rank(&dirs, 1e-7), 4);
    for st in &out.steps {
        for v in std::iter::once(&st.x).chain(&st.observed) {
            assert!(sp.max_violation(&dv(v)).unwrap() <= 1e-6);
        }
    }
    let m = default_trajectories(4);
    let offline = twostep_offline_cost(&sp, &u0, &c, m, &s).unwrap();
    let lower = twostep_cost_lower_bound(&sp, &a, &c, m, &s).unwrap();
    let online = out.total_cost();
    eprintln!("online {online:.4} offline {offline:.4} lower {lower:.4}");
    assert!((offline + 0.1099).abs() < 1e-3);
    assert!((lower + 0.2097).abs() < 1e-3);
    assert!((online + 0.1508).abs() < 1e-3);
    assert!(started.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn refuses_backend_without_psd() {
    let capped = Solver::new(
        Arc::new(CappedBackend {
            inner: ClarabelBackend,
            cap: Capability::SecondOrderCone,
        }),
        SolverSettings::default(),
    );
    let r = solve_twostep(&Polyhedron::unit_box(1), &interval_prior(), &TwoStepData::new(1), &dv(&[-1.0]), DEFAULT_STRICT_TOL, &capped);
    assert!(r.is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn one_dimensional_closed_form(lo in -3.0f64..2.0, width in 0.1f64..1.5, c in prop::sample::select(vec![-1.0, 1.0])) {
            let s = Solver::default();
            let hi = lo + width;
            let (mid, r) = (0.5 * (lo + hi), 0.5 * width);
            let q = QuadraticForm::new(DMatrix::from_element(1, 1, 1.0), dv(&[-2.0 * mid]), mid * mid - r * r);
            let u0 = EllipsoidalMatrixUncertainty::general(1, q).unwrap();
            let amax = lo.abs().max(hi.abs());
            let expect = -1.0 / amax.max(amax * amax).max(1.0);
            let got = solve_twostep(&Polyhedron::unit_box(1), &u0, &TwoStepData::new(1), &dv(&[c]), DEFAULT_STRICT_TOL, &s).unwrap();
            prop_assert!((got.value - expect).abs() < 1e-4, "{} vs {}", got.value, expect);
            prop_assert!(got.certificate.min_eigenvalues.iter().all(|e| *e >= -1e-6));
        }
    }
}
