mod common;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use safelearn::conic::Solver;
use safelearn::geometry::{is_singleton, LiftedPolyhedron, Polyhedron, SingletonTest, SupportOracle};
use safelearn::linear_onestep::*;
use safelearn::LearnError;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn interval(bound: f64) -> MatrixPolytope {
    MatrixPolytope::entrywise_box(1, bound)
}

/// n=2 prior with the (1,2) entry unconstrained.
fn free_entry_prior() -> MatrixPolytope {
    let inf = f64::INFINITY;
    let lo = DMatrix::from_row_slice(2, 2, &[-1.0, -inf, -1.0, -1.0]);
    let hi = DMatrix::from_row_slice(2, 2, &[1.0, inf, 1.0, 1.0]);
    MatrixPolytope::entrywise(&lo, &hi).unwrap()
}

fn example_a_star() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[2.0, 1.0, 4.0, 2.0, 2.0, -3.0, -1.0, -2.0, -2.0, -3.0, 1.0, 0.0, 2.0, 0.0, -2.0, 2.0],
    )
}

#[test]
fn lp_examples_one_dimensional() {
    let s = Solver::default();
    let box1 = Polyhedron::unit_box(1);
    let none = MeasurementSet::new(1);
    let c = dv(&[-1.0]);
    let (x, v) = min_cost_safe_point(&box1, &interval(1.0), &none, &c, &s).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-7 && (v + 1.0).abs() < 1e-7);
    let (x, v) = min_cost_safe_point(&box1, &interval(2.0), &none, &c, &s).unwrap();
    assert!((x[0] - 0.5).abs() < 1e-7 && (v + 0.5).abs() < 1e-7);
}

#[test]
fn lp_free_entry_forces_axis() {
    let s = Solver::default();
    let (region, _) = onestep_region(&Polyhedron::unit_box(2), &free_entry_prior(), &MeasurementSet::new(2)).unwrap();
    for d in [[1.0, 0.0], [-1.0, 0.0]] {
        assert!((region.support(&d, &s).unwrap().value().unwrap() - 1.0).abs() < 1e-7);
    }
    for d in [[0.0, 1.0], [0.0, -1.0]] {
        assert!(region.support(&d, &s).unwrap().value().unwrap().abs() < 1e-7);
    }
}

/// Safe-region oracle for a bounded prior: x is safe iff every vertex of U
/// maps it into S (the constraints are linear in A).
fn vertex_safe_max(s: &Polyhedron, verts: &[DMatrix<f64>], c: &DVector<f64>, solver: &Solver) -> f64 {
    let n = s.dim();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for m in std::iter::once(DMatrix::identity(n, n)).chain(verts.iter().cloned()) {
        for h in s.halfspaces() {
            rows.push((m.transpose() * &h.normal).as_slice().to_vec());
            rhs.push(h.offset);
        }
    }
    let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i][j]);
    let p = LiftedPolyhedron::new(a, DMatrix::zeros(rhs.len(), 0), DVector::from_vec(rhs)).unwrap();
    let neg: Vec<f64> = c.iter().map(|v| -v).collect();
    -p.support(&neg, solver).unwrap().value().unwrap()
}

fn matrix_vertices(u0: &MatrixPolytope, data: &MeasurementSet) -> Vec<DMatrix<f64>> {
    let n = u0.dim();
    let uk = uncertainty_set(u0, data);
    common::vertices(&uk.a, &uk.c, &uk.a_eq, &uk.c_eq)
        .into_iter()
        .map(|v| DMatrix::from_fn(n, n, |a, b| v[a * n + b]))
        .collect()
}

#[test]
fn lp_free_entry_matches_growing_bounded_relaxation() {
    let s = Solver::default();
    let box2 = Polyhedron::unit_box(2);
    let c = dv(&[0.0, -1.0]);
    let mut prev = f64::NEG_INFINITY;
    for m in [1.0, 10.0, 100.0] {
        let lo = DMatrix::from_row_slice(2, 2, &[-1.0, -m, -1.0, -1.0]);
        let hi = DMatrix::from_row_slice(2, 2, &[1.0, m, 1.0, 1.0]);
        let u = MatrixPolytope::entrywise(&lo, &hi).unwrap();
        let verts = matrix_vertices(&u, &MeasurementSet::new(2));
        let oracle = vertex_safe_max(&box2, &verts, &c, &s);
        let (_, lp) = min_cost_safe_point(&box2, &u, &MeasurementSet::new(2), &c, &s).unwrap();
        assert!((oracle - lp).abs() < 1e-6);
        assert!(lp >= prev - 1e-9);
        prev = lp;
    }
    // x₂ can only shrink to 0 as M grows
    assert!(prev > -0.01);
    let (x, _) = min_cost_safe_point(&box2, &free_entry_prior(), &MeasurementSet::new(2), &c, &s).unwrap();
    assert!(x[1].abs() < 1e-7);
}

#[test]
fn online_singleton_prior_needs_no_measurements() {
    let s = Solver::default();
    let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
    let u0 = MatrixPolytope::singleton(&a).unwrap();
    let mut calls = 0;
    let mut oracle = |x: &DVector<f64>| {
        calls += 1;
        &a * x
    };
    let out = learn_online(&Polyhedron::unit_box(2), &u0, &dv(&[-1.0, 0.0]), OnestepOptions::default(), &mut oracle, &s).unwrap();
    assert_eq!(out.measurements_used, 0);
    assert!((out.learned().unwrap() - &a).norm() < 1e-6);
    assert_eq!(calls, 0);
}

#[test]
fn online_free_entry_is_impossible() {
    let s = Solver::default();
    let a = DMatrix::from_row_slice(2, 2, &[0.5, 3.0, -0.5, 0.2]);
    let u0 = free_entry_prior();
    for eps in [0.01, 0.5, 1.0] {
        let opts = OnestepOptions {
            epsilon: eps,
            ..Default::default()
        };
        let out = learn_online(&Polyhedron::unit_box(2), &u0, &dv(&[-1.0, -1.0]), opts, &mut |x| &a * x, &s).unwrap();
        assert!(matches!(out.result, LearnResult::Impossible(_)), "{:?}", out.result);
        assert_eq!(out.measurements_used, 1);
        // oracle check: U₁ still has a free parameter
        let mut data = MeasurementSet::new(2);
        let x = DVector::from_column_slice(&out.steps[0].x);
        data.push(x.clone(), &a * &x).unwrap();
        let u1 = uncertainty_set(&u0, &data);
        assert_eq!(is_singleton(&u1, 1e-6, &s).unwrap(), SingletonTest::NotSingleton);
    }
    let off = learn_offline(&Polyhedron::unit_box(2), &u0, &dv(&[-1.0, -1.0]), OnestepOptions::default(), &mut |x| &a * x, &s).unwrap();
    assert!(matches!(off.result, LearnResult::Impossible(_)));
    assert_eq!(off.measurements_used, 0);
}

#[test]
fn offline_identity_cost() {
    let s = Solver::default();
    let u0 = MatrixPolytope::singleton(&DMatrix::identity(2, 2)).unwrap();
    let c = dv(&[-1.0, 0.0]);
    let s2 = Polyhedron::unit_box(2);
    let (x0, v) = min_cost_safe_point(&s2, &u0, &MeasurementSet::new(2), &c, &s).unwrap();
    assert!((v + 1.0).abs() < 1e-7 && (x0[0] - 1.0).abs() < 1e-7);
    assert!((offline_cost_limit(&s2, &u0, &c, &s).unwrap() + 2.0).abs() < 1e-6);
    let mut costs = Vec::new();
    for eps in [0.1, 0.01, 0.001] {
        let opts = OnestepOptions {
            epsilon: eps,
            ..Default::default()
        };
        let out = learn_offline(&s2, &u0, &c, opts, &mut |x| x.clone(), &s).unwrap();
        assert!((out.learned().unwrap() - DMatrix::identity(2, 2)).norm() < 1e-6);
        costs.push(out.total_cost());
    }
    assert!((costs[2] + 2.0).abs() < 1e-2);
    assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

#[test]
fn lower_bound_examples() {
    let s = Solver::default();
    let v = cost_lower_bound(&Polyhedron::unit_box(4), &DMatrix::identity(4, 4), &dv(&[-1.0, 0.0, 0.0, 0.0]), 4, &s).unwrap();
    assert!((v + 4.0).abs() < 1e-6);
    let v = cost_lower_bound(&Polyhedron::unit_box(1), &DMatrix::from_element(1, 1, 2.0), &dv(&[-1.0]), 1, &s).unwrap();
    assert!((v + 0.5).abs() < 1e-7);
    // empty S¹(A⋆): S = [1, 2], a⋆ = −1
    let shifted = Polyhedron::boxed(&[1.0], &[2.0]).unwrap();
    assert!(matches!(
        cost_lower_bound(&shifted, &DMatrix::from_element(1, 1, -1.0), &dv(&[1.0]), 1, &s),
        Err(LearnError::Infeasible(_))
    ));
}

#[test]
fn example_instance_online_offline_and_bounds() {
    let s = Solver::default();
    let started = Instant::now();
    let a = example_a_star();
    let s4 = Polyhedron::unit_box(4);
    let u0 = MatrixPolytope::entrywise_box(4, 4.0);
    let c = dv(&[-1.0, -1.0, 0.0, 0.0]);
    let out = learn_online(&s4, &u0, &c, OnestepOptions::default(), &mut |x| &a * x, &s).unwrap();
    let learned = out.learned().expect("learned");
    assert!((learned - &a).norm() <= 1e-6);
    assert_eq!(out.measurements_used, 4);
    for st in &out.steps {
        for v in std::iter::once(&st.x).chain(&st.observed) {
            assert!(s4.max_violation(&DVector::from_column_slice(v)).unwrap() <= 1e-6);
        }
    }
    let upper = offline_cost_limit(&s4, &u0, &c, &s).unwrap();
    let lower = cost_lower_bound(&s4, &a, &c, 4, &s).unwrap();
    let online = out.total_cost();
    assert!((upper + 1.0).abs() < 1e-3, "upper {upper}");
    assert!((lower + 2.2264).abs() < 1e-3, "lower {lower}");
    assert!(online <= upper + 1e-6 && online >= lower - 1e-6, "online {online}");
    eprintln!("online cost {online:.4}");
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

/// Random n=2 instances with a bounded prior around a hidden matrix.
fn random_instance(r: &mut impl Rng) -> (Polyhedron, MatrixPolytope, DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(2, 2, |_, _| r.random_range(-1.5..1.5));
    let w: f64 = r.random_range(0.2..1.5);
    let lo = a.map(|v| v - w * r.random_range(0.2..1.0));
    let hi = a.map(|v| v + w * r.random_range(0.2..1.0));
    let u0 = MatrixPolytope::entrywise(&lo, &hi).unwrap();
    let c = dv(&[r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]);
    (Polyhedron::unit_box(2), u0, a, c)
}

#[test]
fn duality_matches_vertex_enumeration() {
    let s = Solver::default();
    let mut r = common::rng(42);
    let mut checked = 0;
    for _ in 0..12 {
        let (sp, u0, a, c) = random_instance(&mut r);
        let mut data = MeasurementSet::new(2);
        for k in 0..2 {
            let Ok((x, _)) = min_cost_safe_point(&sp, &u0, &data, &c, &s) else {
                break;
            };
            let verts = matrix_vertices(&u0, &data);
            for h in sp.halfspaces() {
                let via_dual = worst_case_value(&h.normal, &u0, &data, &x, &s).unwrap();
                let brute = verts.iter().map(|m| h.normal.dot(&(m * &x))).fold(f64::NEG_INFINITY, f64::max);
                assert!((via_dual - brute).abs() < 1e-6, "{via_dual} vs {brute}");
                assert!(via_dual <= h.offset + 1e-6);
                checked += 1;
            }
            // a second point along a fresh axis to grow the data
            let mut x2 = x.clone();
            x2[k] += if x2[k] > 0.0 { -0.1 } else { 0.1 };
            let x2 = if k == 0 { x2 } else { dv(&[x[1], -x[0]]) * 0.1 };
            data.push(x2.clone(), &a * &x2).unwrap();
        }
    }
    assert!(checked > 40);
}

#[test]
fn suite_invariants() {
    let s = Solver::default();
    let mut r = common::rng(7);
    for case in 0..10 {
        let (sp, u0, a, c) = random_instance(&mut r);
        let mut verdicts = Vec::new();
        let mut online_cost = None;
        for eps in [1e-4, 0.01, 0.5, 1.0] {
            let opts = OnestepOptions {
                epsilon: eps,
                ..Default::default()
            };
            let out = learn_online(&sp, &u0, &c, opts, &mut |x| &a * x, &s).unwrap();
            verdicts.push(out.learned().is_some());
            assert!(out.measurements_used <= 2);
            if let Some(l) = out.learned() {
                assert!((l - &a).norm() <= 1e-6, "case {case}");
            }
            // monotone safe region: earlier queries stay feasible for later data
            let mut data = MeasurementSet::new(2);
            for st in &out.steps {
                let x = DVector::from_column_slice(&st.x);
                let y = DVector::from_column_slice(&st.observed[0]);
                assert!(sp.contains(&x, 1e-6).unwrap() && sp.contains(&y, 1e-6).unwrap());
                data.push(x, y).unwrap();
                let (region, _) = onestep_region(&sp, &u0, &data).unwrap();
                for earlier in &out.steps[..st.k] {
                    assert!(region.contains(&DVector::from_column_slice(&earlier.x), 1e-6, &s).unwrap());
                }
            }
            if eps == 1e-4 {
                online_cost = Some(out.total_cost());
            }
        }
        assert!(verdicts.iter().all(|v| *v == verdicts[0]), "case {case}: {verdicts:?}");
        if verdicts[0] {
            let upper = offline_cost_limit(&sp, &u0, &c, &s).unwrap();
            let lower = cost_lower_bound(&sp, &a, &c, 2, &s).unwrap();
            let online = online_cost.unwrap();
            // the upper bound is the ε → 0 limit; blending at ε = 1e-4 adds at most ε·n·2‖c‖₁ < 1e-3
            assert!(upper >= online - 1e-3 && online >= lower - 1e-6, "case {case}: {upper} {online} {lower}");
        }
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // more data never shrinks the one-step safe region
        #[test]
        fn regions_grow_with_data(seed in 0u64..1000) {
            let s = Solver::default();
            let mut r = common::rng(seed);
            let (sp, u0, a, c) = random_instance(&mut r);
            let x = dv(&[r.random_range(-0.3..0.3), r.random_range(-0.3..0.3)]);
            let mut data = MeasurementSet::new(2);
            let (before, _) = onestep_region(&sp, &u0, &data).unwrap();
            data.push(x.clone(), &a * &x).unwrap();
            let (after, _) = onestep_region(&sp, &u0, &data).unwrap();
            for d in [c.as_slice().to_vec(), vec![1.0, 0.0], vec![0.0, -1.0], vec![-0.6, 0.8]] {
                let hb = before.support(&d, &s).unwrap().value().unwrap();
                let ha = after.support(&d, &s).unwrap().value().unwrap();
                prop_assert!(ha >= hb - 1e-7, "{} < {}", ha, hb);
            }
        }

        // the LP optimum maps into S for every vertex of U_k
        #[test]
        fn optimum_is_robustly_safe(seed in 0u64..1000) {
            let s = Solver::default();
            let mut r = common::rng(seed);
            let (sp, u0, _, c) = random_instance(&mut r);
            let (x, _) = min_cost_safe_point(&sp, &u0, &MeasurementSet::new(2), &c, &s).unwrap();
            for m in matrix_vertices(&u0, &MeasurementSet::new(2)) {
                prop_assert!(sp.max_violation(&(m * &x)).unwrap() <= 1e-6);
            }
        }
    }
}
