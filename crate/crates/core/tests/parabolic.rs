use std::sync::Arc;

use adaptive_hierarchy::fom::{AffineSystem, FomSettings};
use adaptive_hierarchy::ml::MlSettings;
use adaptive_hierarchy::parabolic::{fom_only_hierarchy, parabolic_hierarchy, ParabolicHierarchy, STAGE_FOM};
use adaptive_hierarchy::rb::PodSettings;
use adaptive_hierarchy::{Error, Estimate, ParameterDomain, ParameterStream, ParameterVector, QueryRecord};
use proptest::prelude::*;

fn system() -> Arc<AffineSystem> {
    Arc::new(AffineSystem::assemble(&FomSettings::default()).unwrap())
}

fn domain() -> ParameterDomain {
    ParameterDomain::uniform(2, 0.1, 10.0).unwrap()
}

fn hierarchy(sys: &Arc<AffineSystem>, tol: f64, adaptation: bool) -> ParabolicHierarchy {
    parabolic_hierarchy(
        Arc::clone(sys),
        domain(),
        tol,
        PodSettings::default(),
        MlSettings::default(),
        adaptation,
    )
    .unwrap()
}

fn stream(n: usize, seed: u64) -> Vec<ParameterVector> {
    ParameterStream::new(domain(), seed).take(n)
}

fn true_error(sys: &AffineSystem, mu: &ParameterVector, state: &nalgebra::DVector<f64>) -> f64 {
    sys.mass_norm(&(sys.solve(mu).unwrap().final_state() - state))
}

type Fingerprint = (u64, Vec<u64>, usize, Option<u64>, Vec<(usize, usize)>, Vec<usize>);

/// Everything but timings.
fn fingerprint<O>(r: &QueryRecord<O>) -> Fingerprint {
    (
        r.query_id,
        r.mu.values().iter().map(|v| v.to_bits()).collect(),
        r.answer.stage,
        r.answer.estimate.value().map(f64::to_bits),
        r.adaptation_events.clone(),
        r.level_sizes.clone(),
    )
}

#[test]
fn reference_model_alone_answers_everything_at_stage_one() {
    let mut h = fom_only_hierarchy(system(), domain()).unwrap();
    let a = h.handle_request(&ParameterVector::new(vec![1.0, 2.0])).unwrap();
    assert_eq!(a.stage, 1);
    assert_eq!(a.estimate, Estimate::Reference);
    assert_eq!(a.attempts.len(), 1);
}

#[test]
fn zero_tolerance_always_falls_through_and_always_adapts() {
    let sys = system();
    let mut h = hierarchy(&sys, 0.0, true);
    let log = h.run_query_stream(&stream(12, 1));
    assert!(log.error.is_none());
    for r in &log.records {
        assert_eq!(r.answer.stage, STAGE_FOM);
        assert!(r.adaptation_events.contains(&(3, 2)), "{:?}", r.adaptation_events);
        assert!(r.adaptation_events.contains(&(2, 1)), "{:?}", r.adaptation_events);
        for a in &r.answer.attempts[..r.answer.attempts.len() - 1] {
            assert!(a.estimate.value().unwrap() > 0.0);
        }
    }
}

#[test]
fn requerying_an_absorbed_parameter_is_answered_by_a_surrogate() {
    let sys = system();
    let mut h = hierarchy(&sys, 1e-3, true);
    let mu = ParameterVector::new(vec![0.37, 6.2]);
    let first = h.handle_request(&mu).unwrap();
    assert_eq!(first.stage, STAGE_FOM);
    let second = h.handle_request(&mu).unwrap();
    assert!(second.stage < STAGE_FOM);
    let est = second.estimate.value().unwrap();
    assert!(est <= 1e-3);
    assert!(true_error(&sys, &mu, &second.payload.final_state) <= est + 1e-10);
}

#[test]
fn lossless_absorption_reproduces_the_trajectory() {
    // Keep every mode of the absorbed trajectory: it then lies in the
    // reduced space and the residual all but vanishes.
    let sys = system();
    let pod = PodSettings {
        pod_tol: 1e-15,
        n_add_max: sys.k_steps + 1,
        n_max: 200,
    };
    let mut h = parabolic_hierarchy(Arc::clone(&sys), domain(), 1e-6, pod, MlSettings::default(), true).unwrap();
    let mu = ParameterVector::new(vec![0.37, 6.2]);
    assert_eq!(h.handle_request(&mu).unwrap().stage, STAGE_FOM);
    let again = h.handle_request(&mu).unwrap();
    assert_eq!(again.stage, 2);
    let est = again.estimate.value().unwrap();
    assert!(est <= 1e-8, "estimate {est:e}");
}

#[test]
fn repeated_parameter_never_moves_up_the_hierarchy() {
    let sys = system();
    let mut h = hierarchy(&sys, 1e-3, true);
    for mu in stream(30, 8) {
        let a = h.handle_request(&mu).unwrap().stage;
        let b = h.handle_request(&mu).unwrap().stage;
        assert!(b <= a, "{a} then {b} at {:?}", mu.values());
    }
}

#[test]
fn fresh_runs_of_the_same_stream_are_identical() {
    let sys = system();
    let params = stream(80, 42);
    let a = hierarchy(&sys, 1e-3, true).run_query_stream(&params);
    let b = hierarchy(&sys, 1e-3, true).run_query_stream(&params);
    let fa: Vec<_> = a.records.iter().map(fingerprint).collect();
    let fb: Vec<_> = b.records.iter().map(fingerprint).collect();
    assert_eq!(fa, fb);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.answer.payload.qoi.to_bits(), y.answer.payload.qoi.to_bits());
    }
}

#[test]
fn answers_are_certified_and_follow_the_first_accept_rule() {
    let sys = system();
    let tol = 1e-3;
    let mut h = hierarchy(&sys, tol, true);
    let params = stream(120, 7);
    let log = h.run_query_stream(&params);
    assert!(log.error.is_none());
    let mut surrogate_answers = 0;
    let mut last_sizes = vec![0; 3];
    for (i, r) in log.records.iter().enumerate() {
        assert_eq!(r.query_id, i as u64);
        let a = &r.answer;
        let stages: Vec<_> = a.attempts.iter().map(|t| t.stage).collect();
        assert!(stages.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*stages.last().unwrap(), a.stage);
        for t in &a.attempts[..a.attempts.len() - 1] {
            assert!(t.estimate.value().unwrap() > tol);
        }
        if a.stage < STAGE_FOM {
            surrogate_answers += 1;
            let est = a.estimate.value().unwrap();
            assert!(est <= tol);
            let err = true_error(&sys, &r.mu, &a.payload.final_state);
            assert!(err <= est + 1e-10, "query {i}: error {err:e} > estimate {est:e}");
        }
        assert!(r.level_sizes.iter().zip(&last_sizes).all(|(n, o)| n >= o));
        last_sizes = r.level_sizes.clone();
    }
    assert!(surrogate_answers > 60);
}

#[test]
fn without_adaptation_nothing_is_learned() {
    let sys = system();
    let mut h = hierarchy(&sys, 1e-3, false);
    let log = h.run_query_stream(&stream(5, 2));
    for r in &log.records {
        assert_eq!(r.answer.stage, STAGE_FOM);
        assert!(r.adaptation_events.is_empty());
        assert_eq!(r.level_sizes, vec![0, 0, 0]);
    }
}

#[test]
fn out_of_box_parameter_aborts_the_stream() {
    let sys = system();
    let mut h = hierarchy(&sys, 1e-3, true);
    let mut params = stream(3, 4);
    params.insert(2, ParameterVector::new(vec![0.05, 1.0]));
    let log = h.run_query_stream(&params);
    assert_eq!(log.records.len(), 2);
    assert!(matches!(log.error, Some(Error::Domain(_))));
    assert!(h.run_query_stream(&[]).records.is_empty());
}

#[test]
fn baseline_matches_zero_tolerance_run() {
    let sys = system();
    let params = stream(10, 9);
    let zero = hierarchy(&sys, 0.0, true).run_query_stream(&params);
    let base = fom_only_hierarchy(Arc::clone(&sys), domain()).unwrap().run_query_stream(&params);
    for (z, b) in zero.records.iter().zip(&base.records) {
        assert_eq!(z.answer.stage, STAGE_FOM);
        assert_eq!(b.answer.stage, 1);
        assert_eq!(z.answer.payload.qoi.to_bits(), b.answer.payload.qoi.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_surrogate_answer_bounds_its_error(seed in any::<u64>(), extra in 0.1f64..10.0) {
        let sys = system();
        let mut h = hierarchy(&sys, 1e-3, true);
        h.run_query_stream(&stream(6, seed));
        let mu = ParameterVector::new(vec![extra, 10.1 - extra]);
        let a = h.handle_request(&mu).unwrap();
        if let Estimate::Value(est) = a.estimate {
            prop_assert!(true_error(&sys, &mu, &a.payload.final_state) <= est + 1e-10);
        }
    }
}
