//! Ordered model hierarchy with tolerance-gated acceptance.
//!
//! A request is passed to the cheapest ready level first. Each evaluated level
//! gets an error estimate; the first level whose estimate meets the tolerance
//! answers. The top level is a reference model and is accepted without check.
//! Every evaluation produces adaptation payloads that are offered to all
//! cheaper levels, so those levels improve as the run proceeds.

use std::any::Any;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::parameter::{ParameterDomain, ParameterVector};

/// Error estimate of a model output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Value(f64),
    /// Output of the reference model, accepted unconditionally.
    Reference,
}

impl Estimate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Estimate::Value(v) => Some(*v),
            Estimate::Reference => None,
        }
    }

    pub fn is_reference(&self) -> bool {
        matches!(self, Estimate::Reference)
    }

    /// Acceptance test. A zero tolerance never accepts a surrogate.
    pub fn meets(&self, tolerance: f64) -> bool {
        match self {
            Estimate::Reference => true,
            Estimate::Value(v) => tolerance > 0.0 && *v <= tolerance,
        }
    }
}

/// Output of one evaluation plus the training data it produced for cheaper levels.
pub struct Evaluation<O, P> {
    pub output: O,
    pub payloads: Vec<P>,
}

impl<O, P> Evaluation<O, P> {
    pub fn new(output: O) -> Self {
        Evaluation {
            output,
            payloads: Vec::new(),
        }
    }

    pub fn with_payloads(output: O, payloads: Vec<P>) -> Self {
        Evaluation { output, payloads }
    }
}

/// Result of offering a payload to a level.
pub struct Absorbed<P> {
    /// Whether the level used the payload.
    pub used: bool,
    /// Follow-up payloads for the levels below this one.
    pub emitted: Vec<P>,
}

impl<P> Absorbed<P> {
    pub fn ignored() -> Self {
        Absorbed {
            used: false,
            emitted: Vec::new(),
        }
    }

    pub fn used() -> Self {
        Absorbed {
            used: true,
            emitted: Vec::new(),
        }
    }

    pub fn used_and_emit(emitted: Vec<P>) -> Self {
        Absorbed {
            used: true,
            emitted,
        }
    }
}

/// A model in the hierarchy.
///
/// `estimate_error` may consult the next, more accurate level through
/// `next`; implementations that need concrete access downcast via
/// [`ModelLevel::as_any`].
pub trait ModelLevel {
    type Output;
    type Payload;

    fn name(&self) -> &str;

    fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<Self::Output, Self::Payload>>;

    fn estimate_error(
        &self,
        output: &Self::Output,
        mu: &ParameterVector,
        next: Option<&dyn ModelLevel<Output = Self::Output, Payload = Self::Payload>>,
    ) -> Result<Estimate>;

    fn absorb(&mut self, payload: &Self::Payload) -> Result<Absorbed<Self::Payload>>;

    fn is_ready(&self) -> bool;

    /// Size of the adaptive state (training set size, basis dimension, ...).
    /// Must never decrease.
    fn state_size(&self) -> usize {
        0
    }

    fn as_any(&self) -> &dyn Any;
}

pub type BoxedLevel<O, P> = Box<dyn ModelLevel<Output = O, Payload = P>>;

/// Adaptation event: a payload from the first stage absorbed by the second.
pub type Event = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attempt {
    /// 1-based stage index.
    pub stage: usize,
    pub eval_s: f64,
    pub estimate_s: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone)]
pub struct CertifiedAnswer<O> {
    pub payload: O,
    pub stage: usize,
    pub estimate: Estimate,
    pub tolerance: f64,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone)]
pub struct QueryRecord<O> {
    pub query_id: u64,
    pub mu: ParameterVector,
    pub answer: CertifiedAnswer<O>,
    /// `(source_stage, target_stage)` for every payload a level used.
    pub adaptation_events: Vec<(usize, usize)>,
    /// Wall time for the whole request including adaptation.
    pub wall_s: f64,
    /// `state_size` of every level after the request.
    pub level_sizes: Vec<usize>,
}

/// Log of a query stream. `error` is set when the stream was aborted.
#[derive(Debug)]
pub struct StreamLog<O> {
    pub records: Vec<QueryRecord<O>>,
    pub error: Option<Error>,
}

pub struct Hierarchy<O, P> {
    levels: Vec<BoxedLevel<O, P>>,
    domain: ParameterDomain,
    tolerance: f64,
    adaptation_enabled: bool,
    next_query_id: u64,
}

impl<O, P> Hierarchy<O, P> {
    pub fn new(
        levels: Vec<BoxedLevel<O, P>>,
        domain: ParameterDomain,
        tolerance: f64,
        adaptation_enabled: bool,
    ) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("a hierarchy needs at least one level"));
        }
        if !(tolerance >= 0.0) {
            return Err(Error::config(format!("tolerance must be nonnegative, got {tolerance}")));
        }
        domain.validate()?;
        Ok(Hierarchy {
            levels,
            domain,
            tolerance,
            adaptation_enabled,
            next_query_id: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn domain(&self) -> &ParameterDomain {
        &self.domain
    }

    /// Read-only view of a level (0-based).
    pub fn level(&self, index: usize) -> &dyn ModelLevel<Output = O, Payload = P> {
        self.levels[index].as_ref()
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.state_size()).collect()
    }

    pub fn handle_request(&mut self, mu: &ParameterVector) -> Result<CertifiedAnswer<O>> {
        self.handle(mu).map(|(answer, _)| answer)
    }

    fn handle(&mut self, mu: &ParameterVector) -> Result<(CertifiedAnswer<O>, Vec<Event>)> {
        self.domain.check(mu)?;
        let top = self.levels.len() - 1;
        if !self.levels[top].is_ready() {
            return Err(Error::config(format!(
                "top level '{}' is not ready",
                self.levels[top].name()
            )));
        }

        let mut attempts = Vec::new();
        let mut events = Vec::new();
        for index in 0..=top {
            if !self.levels[index].is_ready() {
                continue;
            }

            let start = Instant::now();
            let Evaluation { output, payloads } = self.levels[index].evaluate(mu)?;
            let eval_s = start.elapsed().as_secs_f64();

            let start = Instant::now();
            let next = self.levels.get(index + 1).map(|l| l.as_ref());
            let estimate = self.levels[index].estimate_error(&output, mu, next)?;
            let estimate_s = start.elapsed().as_secs_f64();
            if index < top && estimate.is_reference() {
                return Err(Error::config(format!(
                    "level '{}' claims to be a reference model but is not the last level",
                    self.levels[index].name()
                )));
            }

            let stage = index + 1;
            attempts.push(Attempt {
                stage,
                eval_s,
                estimate_s,
                estimate,
            });

            if self.adaptation_enabled && !payloads.is_empty() {
                self.broadcast(index, payloads, &mut events)?;
            }

            if index == top || estimate.meets(self.tolerance) {
                let answer = CertifiedAnswer {
                    payload: output,
                    stage,
                    estimate,
                    tolerance: self.tolerance,
                    attempts,
                };
                return Ok((answer, events));
            }
        }
        unreachable!("the top level always answers")
    }

    /// Offers `payloads` produced at level `source` to every cheaper level,
    /// nearest first. Payloads a level emits in response cascade further down.
    fn broadcast(&mut self, source: usize, payloads: Vec<P>, events: &mut Vec<(usize, usize)>) -> Result<()> {
        for target in (0..source).rev() {
            for payload in &payloads {
                let before = self.levels[target].state_size();
                let absorbed = self.levels[target].absorb(payload)?;
                debug_assert!(
                    self.levels[target].state_size() >= before,
                    "adaptation shrank level '{}'",
                    self.levels[target].name()
                );
                if absorbed.used {
                    events.push((source + 1, target + 1));
                }
                if !absorbed.emitted.is_empty() {
                    self.broadcast(target, absorbed.emitted, events)?;
                }
            }
        }
        Ok(())
    }

    /// Runs one request and wraps it into a [`QueryRecord`].
    pub fn record_request(&mut self, mu: &ParameterVector) -> Result<QueryRecord<O>> {
        let start = Instant::now();
        let (answer, adaptation_events) = self.handle(mu)?;
        let wall_s = start.elapsed().as_secs_f64();
        let query_id = self.next_query_id;
        self.next_query_id += 1;
        Ok(QueryRecord {
            query_id,
            mu: mu.clone(),
            answer,
            adaptation_events,
            wall_s,
            level_sizes: self.level_sizes(),
        })
    }

    /// Sequentially answers every request; adaptive state carries over.
    /// The first failing request aborts the stream.
    pub fn run_query_stream<'a, I>(&mut self, stream: I) -> StreamLog<O>
    where
        I: IntoIterator<Item = &'a ParameterVector>,
    {
        let mut records = Vec::new();
        for mu in stream {
            match self.record_request(mu) {
                Ok(record) => records.push(record),
                Err(error) => {
                    return StreamLog {
                        records,
                        error: Some(error),
                    }
                }
            }
        }
        StreamLog { records, error: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Level with a fixed estimate that counts what it absorbs.
    struct Fixed {
        name: String,
        estimate: Estimate,
        ready: bool,
        absorbed: usize,
        ready_after: Option<usize>,
    }

    impl Fixed {
        fn boxed(name: &str, estimate: Estimate) -> BoxedLevel<f64, usize> {
            Box::new(Fixed {
                name: name.into(),
                estimate,
                ready: true,
                absorbed: 0,
                ready_after: None,
            })
        }

        fn learner(name: &str, estimate: Estimate, ready_after: usize) -> BoxedLevel<f64, usize> {
            Box::new(Fixed {
                name: name.into(),
                estimate,
                ready: false,
                absorbed: 0,
                ready_after: Some(ready_after),
            })
        }
    }

    impl ModelLevel for Fixed {
        type Output = f64;
        type Payload = usize;

        fn name(&self) -> &str {
            &self.name
        }

        fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<f64, usize>> {
            Ok(Evaluation::with_payloads(mu.get(0), vec![1]))
        }

        fn estimate_error(
            &self,
            _: &f64,
            _: &ParameterVector,
            _: Option<&dyn ModelLevel<Output = f64, Payload = usize>>,
        ) -> Result<Estimate> {
            Ok(self.estimate)
        }

        fn absorb(&mut self, payload: &usize) -> Result<Absorbed<usize>> {
            self.absorbed += payload;
            if let Some(n) = self.ready_after {
                self.ready = self.absorbed >= n;
            }
            Ok(Absorbed::used())
        }

        fn is_ready(&self) -> bool {
            self.ready
        }

        fn state_size(&self) -> usize {
            self.absorbed
        }

        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    fn unit_box() -> ParameterDomain {
        ParameterDomain::uniform(1, 0.0, 1.0).unwrap()
    }

    #[test]
    fn single_reference_level_always_answers() {
        let mut h = Hierarchy::new(vec![Fixed::boxed("ref", Estimate::Reference)], unit_box(), 1e-3, true).unwrap();
        let a = h.handle_request(&vec![0.5].into()).unwrap();
        assert_eq!(a.stage, 1);
        assert_eq!(a.estimate, Estimate::Reference);
        assert_eq!(a.attempts.len(), 1);
    }

    #[test]
    fn zero_tolerance_falls_through_and_fires_all_events() {
        let levels = vec![
            Fixed::boxed("a", Estimate::Value(1e-9)),
            Fixed::boxed("b", Estimate::Value(1e-9)),
            Fixed::boxed("ref", Estimate::Reference),
        ];
        let mut h = Hierarchy::new(levels, unit_box(), 0.0, true).unwrap();
        for q in 0..4 {
            let r = h.record_request(&vec![0.25].into()).unwrap();
            assert_eq!(r.query_id, q);
            assert_eq!(r.answer.stage, 3);
            assert!(r.adaptation_events.contains(&(3, 2)));
            assert!(r.adaptation_events.contains(&(2, 1)));
        }
    }

    #[test]
    fn first_acceptable_stage_answers() {
        let levels = vec![
            Fixed::boxed("a", Estimate::Value(0.5)),
            Fixed::boxed("b", Estimate::Value(1e-4)),
            Fixed::boxed("ref", Estimate::Reference),
        ];
        let mut h = Hierarchy::new(levels, unit_box(), 1e-3, true).unwrap();
        let a = h.handle_request(&vec![0.1].into()).unwrap();
        assert_eq!(a.stage, 2);
        let stages: Vec<_> = a.attempts.iter().map(|t| t.stage).collect();
        assert_eq!(stages, vec![1, 2]);
    }

    #[test]
    fn unready_levels_are_skipped_until_trained() {
        let levels = vec![
            Fixed::learner("ml", Estimate::Value(0.0), 2),
            Fixed::boxed("ref", Estimate::Reference),
        ];
        let mut h = Hierarchy::new(levels, unit_box(), 1e-3, true).unwrap();
        let first = h.handle_request(&vec![0.1].into()).unwrap();
        assert_eq!(first.stage, 2);
        assert_eq!(first.attempts.len(), 1);
        h.handle_request(&vec![0.2].into()).unwrap();
        let third = h.handle_request(&vec![0.3].into()).unwrap();
        assert_eq!(third.stage, 1);
    }

    #[test]
    fn adaptation_can_be_disabled() {
        let levels = vec![
            Fixed::learner("ml", Estimate::Value(0.0), 1),
            Fixed::boxed("ref", Estimate::Reference),
        ];
        let mut h = Hierarchy::new(levels, unit_box(), 1e-3, false).unwrap();
        for _ in 0..3 {
            let r = h.record_request(&vec![0.1].into()).unwrap();
            assert_eq!(r.answer.stage, 2);
            assert!(r.adaptation_events.is_empty());
        }
    }

    #[test]
    fn out_of_box_request_is_a_domain_error() {
        let mut h = Hierarchy::new(vec![Fixed::boxed("ref", Estimate::Reference)], unit_box(), 1e-3, true).unwrap();
        assert!(matches!(h.handle_request(&vec![1.5].into()), Err(Error::Domain(_))));
    }

    #[test]
    fn reference_below_top_is_rejected() {
        let levels = vec![
            Fixed::boxed("bad", Estimate::Reference),
            Fixed::boxed("ref", Estimate::Reference),
        ];
        let mut h = Hierarchy::new(levels, unit_box(), 1e-3, true).unwrap();
        assert!(matches!(h.handle_request(&vec![0.5].into()), Err(Error::Config(_))));
    }

    #[test]
    fn stream_aborts_on_first_domain_error_with_partial_log() {
        let mut h = Hierarchy::new(vec![Fixed::boxed("ref", Estimate::Reference)], unit_box(), 1e-3, true).unwrap();
        let stream: Vec<ParameterVector> = vec![vec![0.1].into(), vec![2.0].into(), vec![0.3].into()];
        let log = h.run_query_stream(&stream);
        assert_eq!(log.records.len(), 1);
        assert!(matches!(log.error, Some(Error::Domain(_))));
        assert!(h.run_query_stream(&[]).records.is_empty());
    }

    #[test]
    fn empty_hierarchy_is_a_config_error() {
        let levels: Vec<BoxedLevel<f64, usize>> = Vec::new();
        assert!(Hierarchy::new(levels, unit_box(), 1e-3, true).is_err());
    }

    #[test]
    fn zero_tolerance_rejects_zero_estimates() {
        assert!(!Estimate::Value(0.0).meets(0.0));
        assert!(Estimate::Value(0.0).meets(1e-12));
        assert!(Estimate::Reference.meets(0.0));
        assert!(!Estimate::Value(f64::NAN).meets(1.0));
    }
}
