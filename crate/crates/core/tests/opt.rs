use std::rc::Rc;

use adaptive_hierarchy::opt::{
    descend, fd_gradient, full_only_hierarchy, himmelblau, opt_hierarchy, DescentSettings, FullLevel, ObjectiveOracle,
    OptHierarchy, OptSettings, SurrogateLevel, FD_STEP,
};
use adaptive_hierarchy::{Estimate, ParameterDomain, ParameterStream, ParameterVector};
use proptest::prelude::*;

fn square() -> ParameterDomain {
    ParameterDomain::uniform(2, -5.0, 5.0).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn fast() -> OptSettings {
    OptSettings {
        delay_s: 0.0,
        ..OptSettings::default()
    }
}

fn starts(n: usize, seed: u64) -> Vec<ParameterVector> {
    ParameterStream::new(square(), seed).take(n)
}

fn surrogate(h: &OptHierarchy) -> &SurrogateLevel {
    h.level(0).as_any().downcast_ref().unwrap()
}

#[test]
fn quadratic_descent_finds_the_center() {
    let c = [1.3, -2.2];
    let f = move |x: &[f64]| (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    for x0 in [[-5.0, -5.0], [4.9, 0.3], [0.0, 0.0], [5.0, 5.0]] {
        let r = descend(&f, &square(), &x0, &DescentSettings::default());
        let dist = ((r.x[0] - c[0]).powi(2) + (r.x[1] - c[1]).powi(2)).sqrt();
        assert!(dist <= 1e-6, "from {x0:?}: {:?}", r.x);
    }
}

#[test]
fn stationary_start_is_returned_unchanged() {
    let f = |x: &[f64]| x[0] * x[0] + x[1] * x[1];
    let r = descend(&f, &square(), &[0.0, 0.0], &DescentSettings::default());
    assert_eq!(r.x, vec![0.0, 0.0]);
    assert_eq!(r.iterations, 0);
}

#[test]
fn himmelblau_descent_reaches_the_nearby_minimum() {
    let r = descend(&himmelblau, &square(), &[3.5, 2.0], &DescentSettings::default());
    let g = fd_gradient(&himmelblau, &square(), &r.x, FD_STEP);
    assert!(norm(&g) <= 1e-6, "gradient {g:?} at {:?}", r.x);
    assert!((r.x[0] - 3.0).abs() <= 1e-4 && (r.x[1] - 2.0).abs() <= 1e-4, "{:?}", r.x);
    assert!(r.value <= 1e-10);
}

#[test]
fn descent_stays_in_the_box() {
    // Unconstrained minimum outside the box: the iterate stops at the boundary.
    let f = |x: &[f64]| (x[0] - 8.0).powi(2) + x[1] * x[1];
    let r = descend(&f, &square(), &[0.0, 1.0], &DescentSettings::default());
    assert_eq!(r.x[0], 5.0);
    assert!(r.x[1].abs() <= 1e-6);
}

#[test]
fn fd_gradient_examples() {
    let a = [0.7, -3.1];
    let linear = move |x: &[f64]| a[0] * x[0] + a[1] * x[1];
    for x in [[0.2, 0.4], [-5.0, 5.0], [5.0, -4.999995]] {
        let g = fd_gradient(&linear, &square(), &x, FD_STEP);
        assert!((g[0] - a[0]).abs() <= 1e-9 && (g[1] - a[1]).abs() <= 1e-9, "{g:?} at {x:?}");
    }
    let g = fd_gradient(&|x: &[f64]| x[0] * x[0] + x[1] * x[1], &square(), &[0.0, 0.0], FD_STEP);
    assert!(norm(&g) <= 1e-9);
    assert!(norm(&fd_gradient(&himmelblau, &square(), &[3.0, 2.0], FD_STEP)) <= 1e-6);
}

#[test]
fn fd_gradient_charges_two_calls_per_component() {
    let oracle = ObjectiveOracle::himmelblau(0.0);
    fd_gradient(&oracle, &square(), &[1.0, 1.0], FD_STEP);
    assert_eq!(oracle.calls(), 4);
    fd_gradient(&oracle, &square(), &[5.0, -5.0], FD_STEP);
    assert_eq!(oracle.calls(), 8);
}

#[test]
fn first_request_is_answered_by_the_full_level_and_trains_the_surrogate() {
    let oracle = Rc::new(ObjectiveOracle::himmelblau(0.0));
    let mut h = opt_hierarchy(oracle, square(), &fast(), true).unwrap();
    let rec = h.record_request(&ParameterVector::new(vec![1.0, 1.0])).unwrap();
    assert_eq!(rec.answer.stage, 2);
    assert_eq!(rec.answer.estimate, Estimate::Reference);
    assert!(rec.level_sizes[0] >= 1);
    assert_eq!(rec.adaptation_events, vec![(2, 1)]);
}

#[test]
fn oracle_calls_are_fully_accounted_for() {
    let oracle = Rc::new(ObjectiveOracle::himmelblau(0.0));
    let mut h = opt_hierarchy(Rc::clone(&oracle), square(), &fast(), true).unwrap();
    let params = starts(40, 3);
    let log = h.run_query_stream(&params);
    assert!(log.error.is_none());
    let full: &FullLevel = h.level(1).as_any().downcast_ref().unwrap();
    assert_eq!(oracle.calls(), full.charged_calls() + surrogate(&h).charged_calls());
    assert!(surrogate(&h).charged_calls() > 0);
}

#[test]
fn accepted_candidates_recheck_exactly() {
    let oracle = Rc::new(ObjectiveOracle::himmelblau(0.0));
    let settings = fast();
    let mut h = opt_hierarchy(Rc::clone(&oracle), square(), &settings, true).unwrap();
    let params = starts(100, 42);
    let log = h.run_query_stream(&params);
    let accepted: Vec<_> = log.records.iter().filter(|r| r.answer.stage == 1).collect();
    assert!(accepted.iter().any(|r| r.query_id >= 50), "no late stage-1 acceptance");
    for rec in accepted {
        let g = norm(&fd_gradient(&himmelblau, &square(), &rec.answer.payload.x, FD_STEP));
        let stored = rec.answer.estimate.value().unwrap();
        assert!((g - stored).abs() <= 1e-12, "{g} vs {stored}");
        assert!(g <= settings.tol_grad);
    }
}

#[test]
fn infinite_tolerance_accepts_every_ready_surrogate_answer() {
    let settings = OptSettings {
        tol_grad: f64::INFINITY,
        ..fast()
    };
    let mut h = opt_hierarchy(Rc::new(ObjectiveOracle::himmelblau(0.0)), square(), &settings, true).unwrap();
    let mut ready_seen = false;
    for mu in starts(20, 5) {
        let ready = h.level(0).is_ready();
        ready_seen |= ready;
        let stage = h.handle_request(&mu).unwrap().stage;
        assert_eq!(stage, if ready { 1 } else { 2 });
    }
    assert!(ready_seen);
}

#[test]
fn disabled_surrogate_reproduces_plain_multistart_bitwise() {
    let settings = fast();
    let params = starts(15, 11);
    let mut h = opt_hierarchy(Rc::new(ObjectiveOracle::himmelblau(0.0)), square(), &settings, false).unwrap();
    let mut base = full_only_hierarchy(Rc::new(ObjectiveOracle::himmelblau(0.0)), square(), &settings).unwrap();
    for mu in &params {
        let a = h.handle_request(mu).unwrap();
        let b = base.handle_request(mu).unwrap();
        let plain = descend(&himmelblau, &square(), mu.values(), &settings.descent());
        assert_eq!(a.stage, 2);
        assert_eq!(a.payload.x, plain.x);
        assert_eq!(a.payload.value.to_bits(), plain.value.to_bits());
        assert_eq!(b.payload.x, plain.x);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn descent_never_increases_the_objective(x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let start = himmelblau(&[x, y]);
        let r = descend(&himmelblau, &square(), &[x, y], &DescentSettings { max_iters: 50, ..Default::default() });
        prop_assert!(r.value <= start);
        prop_assert!(square().contains(&ParameterVector::new(r.x.clone())));
    }
}
