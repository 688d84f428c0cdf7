//! Two-stage multistart optimization demo.
//!
//! A request is a start point; the answer is a local minimizer. The cheap
//! level runs gradient descent on a kernel surrogate of the objective and is
//! accepted when the true objective's finite-difference gradient at its
//! candidate is small. The expensive level runs the same descent on the true
//! objective and hands every sample it touched to the surrogate.

use std::any::Any;
use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Absorbed, BoxedLevel, Estimate, Evaluation, Hierarchy, ModelLevel};
use crate::ml::{InputScaling, KernelRegressor, LengthscalePolicy, MlSettings, TrainingSet};
use crate::parameter::{ParameterDomain, ParameterVector};

pub const FD_STEP: f64 = 1e-5;

pub trait Objective {
    fn value(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64> Objective for F {
    fn value(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// `(x^2 + y - 11)^2 + (x + y^2 - 7)^2`.
pub fn himmelblau(x: &[f64]) -> f64 {
    let (a, b) = (x[0], x[1]);
    (a * a + b - 11.0).powi(2) + (a + b * b - 7.0).powi(2)
}

type ObjectiveFn = dyn Fn(&[f64]) -> f64;

/// The expensive objective. Counts every call and optionally sleeps to make
/// its cost measurable.
pub struct ObjectiveOracle {
    f: Box<ObjectiveFn>,
    calls: Cell<u64>,
    delay: Duration,
}

impl ObjectiveOracle {
    pub fn new(f: impl Fn(&[f64]) -> f64 + 'static, delay_s: f64) -> Self {
        ObjectiveOracle {
            f: Box::new(f),
            calls: Cell::new(0),
            delay: Duration::from_secs_f64(delay_s.max(0.0)),
        }
    }

    pub fn himmelblau(delay_s: f64) -> Self {
        Self::new(himmelblau, delay_s)
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }
}

impl Objective for ObjectiveOracle {
    fn value(&self, x: &[f64]) -> f64 {
        self.calls.set(self.calls.get() + 1);
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        (self.f)(x)
    }
}

/// Wraps an objective and keeps every `(x, f(x))` pair it was asked for.
struct Recording<'a> {
    inner: &'a dyn Objective,
    samples: RefCell<Vec<(Vec<f64>, f64)>>,
}

impl Objective for Recording<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let v = self.inner.value(x);
        self.samples.borrow_mut().push((x.to_vec(), v));
        v
    }
}

/// Surrogate objective backed by a scalar kernel regressor.
struct SurrogateObjective<'a>(&'a KernelRegressor);

impl Objective for SurrogateObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.predict_scalar(&ParameterVector::new(x.to_vec()))
    }
}

/// Central differences with step `h`; one-sided within `h` of the box.
/// Always costs `2 * dim` objective calls.
pub fn fd_gradient(objective: &dyn Objective, domain: &ParameterDomain, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let (lo, hi) = (domain.lo[i], domain.hi[i]);
            let (a, b) = if x[i] - h < lo {
                (x[i], x[i] + h)
            } else if x[i] + h > hi {
                (x[i] - h, x[i])
            } else {
                (x[i] - h, x[i] + h)
            };
            probe[i] = b;
            let fb = objective.value(&probe);
            probe[i] = a;
            let fa = objective.value(&probe);
            probe[i] = x[i];
            (fb - fa) / (b - a)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clamp(domain: &ParameterDomain, x: &mut [f64]) {
    for (i, v) in x.iter_mut().enumerate() {
        *v = v.clamp(domain.lo[i], domain.hi[i]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub fd_step: f64,
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for DescentSettings {
    fn default() -> Self {
        DescentSettings {
            max_iters: 500,
            grad_tol: 1e-8,
            fd_step: FD_STEP,
            armijo: 1e-4,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
}

/// Projected gradient descent with finite-difference gradients and an Armijo
/// backtracking line search. Each search starts at twice the previous
/// accepted step (capped at 1) and halves until sufficient decrease.
pub fn descend(
    objective: &dyn Objective,
    domain: &ParameterDomain,
    x0: &[f64],
    settings: &DescentSettings,
) -> DescentResult {
    let mut x = x0.to_vec();
    clamp(domain, &mut x);
    let mut fx = objective.value(&x);
    let mut step = 1.0_f64;
    let mut iterations = 0;
    while iterations < settings.max_iters {
        let g = fd_gradient(objective, domain, &x, settings.fd_step);
        if norm(&g) <= settings.grad_tol {
            break;
        }
        iterations += 1;
        let mut t = (2.0 * step).min(1.0);
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let mut trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            clamp(domain, &mut trial);
            let decrease: f64 = g.iter().zip(x.iter().zip(&trial)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if decrease <= 0.0 {
                break;
            }
            let ft = objective.value(&trial);
            if ft <= fx - settings.armijo * decrease {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, ft)) => {
                x = trial;
                fx = ft;
                step = t;
            }
            None => break,
        }
    }
    DescentResult {
        x,
        value: fx,
        iterations,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptSettings {
    #[serde(rename = "TOL_grad")]
    pub tol_grad: f64,
    pub max_iters: usize,
    pub delay_s: f64,
    /// Minimum scaled distance between surrogate training inputs.
    pub sample_spacing: f64,
    /// Regressor of the objective surrogate.
    pub surrogate: MlSettings,
}

impl Default for OptSettings {
    fn default() -> Self {
        OptSettings {
            tol_grad: 1e-3,
            max_iters: 500,
            delay_s: 0.002,
            sample_spacing: 0.003,
            // A certified minimizer needs gradient accuracy far below the
            // objective's scale, hence the short lengthscale and tiny ridge.
            surrogate: MlSettings {
                n_min: 10,
                lengthscale: LengthscalePolicy::Fixed(0.1),
                ridge: 1e-12,
                input_scaling: InputScaling::Linear,
            },
        }
    }
}

impl OptSettings {
    pub fn descent(&self) -> DescentSettings {
        DescentSettings {
            max_iters: self.max_iters,
            ..DescentSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_grad >= 0.0) {
            return Err(Error::config("TOL_grad must be nonnegative"));
        }
        if !(self.delay_s >= 0.0 && self.delay_s.is_finite()) {
            return Err(Error::config("delay_s must be nonnegative"));
        }
        if !(self.sample_spacing >= 0.0) {
            return Err(Error::config("sample_spacing must be nonnegative"));
        }
        self.surrogate.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptOutput {
    pub x: Vec<f64>,
    /// Objective value of the model that produced the candidate.
    pub value: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum OptPayload {
    Samples(Vec<(Vec<f64>, f64)>),
}

pub type OptHierarchy = Hierarchy<OptOutput, OptPayload>;

/// Descent on the true objective.
pub struct FullLevel {
    oracle: Rc<ObjectiveOracle>,
    domain: ParameterDomain,
    descent: DescentSettings,
    charged: Cell<u64>,
}

impl FullLevel {
    pub fn new(oracle: Rc<ObjectiveOracle>, domain: ParameterDomain, descent: DescentSettings) -> Self {
        FullLevel {
            oracle,
            domain,
            descent,
            charged: Cell::new(0),
        }
    }

    pub fn oracle(&self) -> &Rc<ObjectiveOracle> {
        &self.oracle
    }

    /// Oracle calls spent in descents.
    pub fn charged_calls(&self) -> u64 {
        self.charged.get()
    }
}

impl ModelLevel for FullLevel {
    type Output = OptOutput;
    type Payload = OptPayload;

    fn name(&self) -> &str {
        "full"
    }

    fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<OptOutput, OptPayload>> {
        let before = self.oracle.calls();
        let recording = Recording {
            inner: self.oracle.as_ref(),
            samples: RefCell::new(Vec::new()),
        };
        let result = descend(&recording, &self.domain, mu.values(), &self.descent);
        self.charged.set(self.charged.get() + self.oracle.calls() - before);
        let output = OptOutput {
            x: result.x,
            value: result.value,
            iterations: result.iterations,
        };
        Ok(Evaluation::with_payloads(
            output,
            vec![OptPayload::Samples(recording.samples.into_inner())],
        ))
    }

    fn estimate_error(
        &self,
        _: &OptOutput,
        _: &ParameterVector,
        _: Option<&dyn ModelLevel<Output = OptOutput, Payload = OptPayload>>,
    ) -> Result<Estimate> {
        Ok(Estimate::Reference)
    }

    fn absorb(&mut self, _: &OptPayload) -> Result<Absorbed<OptPayload>> {
        Ok(Absorbed::ignored())
    }

    fn is_ready(&self) -> bool {
        true
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Descent on a kernel surrogate of the objective.
pub struct SurrogateLevel {
    domain: ParameterDomain,
    descent: DescentSettings,
    ml: MlSettings,
    spacing: f64,
    training: TrainingSet,
    regressor: Option<KernelRegressor>,
    charged: Cell<u64>,
}

impl SurrogateLevel {
    pub fn new(domain: ParameterDomain, descent: DescentSettings, ml: MlSettings, spacing: f64) -> Result<Self> {
        ml.validate()?;
        Ok(SurrogateLevel {
            training: TrainingSet::with_scaling(domain.clone(), ml.input_scaling)?,
            domain,
            descent,
            ml,
            spacing,
            regressor: None,
            charged: Cell::new(0),
        })
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.training
    }

    /// Oracle calls spent in acceptance checks.
    pub fn charged_calls(&self) -> u64 {
        self.charged.get()
    }

    /// Index of the nearest stored input closer than the spacing, if any.
    fn crowding(&self, scaled: &[f64]) -> Option<usize> {
        let r2 = self.spacing * self.spacing;
        self.training
            .scaled_inputs()
            .iter()
            .map(|c| c.iter().zip(scaled).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .enumerate()
            .filter(|(_, d2)| *d2 < r2 || *d2 == 0.0)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
    }
}

impl ModelLevel for SurrogateLevel {
    type Output = OptOutput;
    type Payload = OptPayload;

    fn name(&self) -> &str {
        "surrogate"
    }

    fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<OptOutput, OptPayload>> {
        let regressor = self
            .regressor
            .as_ref()
            .ok_or_else(|| Error::NotReady("surrogate has not been fitted".into()))?;
        let result = descend(&SurrogateObjective(regressor), &self.domain, mu.values(), &self.descent);
        Ok(Evaluation::new(OptOutput {
            x: result.x,
            value: result.value,
            iterations: result.iterations,
        }))
    }

    /// Gradient norm of the true objective at the candidate, evaluated
    /// through the next level's oracle.
    fn estimate_error(
        &self,
        output: &OptOutput,
        _: &ParameterVector,
        next: Option<&dyn ModelLevel<Output = OptOutput, Payload = OptPayload>>,
    ) -> Result<Estimate> {
        let full = next
            .and_then(|l| l.as_any().downcast_ref::<FullLevel>())
            .ok_or_else(|| Error::config("surrogate level must sit directly below the full level"))?;
        let oracle = full.oracle();
        let before = oracle.calls();
        let g = fd_gradient(oracle.as_ref(), &self.domain, &output.x, self.descent.fd_step);
        self.charged.set(self.charged.get() + oracle.calls() - before);
        Ok(Estimate::Value(norm(&g)))
    }

    fn absorb(&mut self, payload: &OptPayload) -> Result<Absorbed<OptPayload>> {
        let OptPayload::Samples(samples) = payload;
        let mut added = false;
        for (x, v) in samples {
            let mu = ParameterVector::new(x.clone());
            if !self.domain.contains(&mu) || !v.is_finite() {
                continue;
            }
            // Within the spacing only the lower value is kept, so the data
            // near a minimum sharpens as descents converge.
            match self.crowding(&self.training.scaling().apply(&self.domain, &mu)) {
                None => {
                    self.training.insert(mu, vec![*v])?;
                    added = true;
                }
                Some(i) if *v < self.training.outputs()[i][0] => {
                    self.training.replace(i, mu, vec![*v])?;
                    added = true;
                }
                Some(_) => {}
            }
        }
        if added && self.training.len() >= self.ml.n_min {
            self.regressor = Some(KernelRegressor::fit(
                &self.training,
                self.ml.lengthscale,
                self.ml.ridge,
                self.ml.n_min,
            )?);
        }
        Ok(Absorbed::used())
    }

    fn is_ready(&self) -> bool {
        self.regressor.is_some()
    }

    fn state_size(&self) -> usize {
        self.training.len()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Surrogate and full level over the box `domain`, sharing `oracle`.
pub fn opt_hierarchy(
    oracle: Rc<ObjectiveOracle>,
    domain: ParameterDomain,
    settings: &OptSettings,
    adaptation_enabled: bool,
) -> Result<OptHierarchy> {
    settings.validate()?;
    let descent = settings.descent();
    let levels: Vec<BoxedLevel<OptOutput, OptPayload>> = vec![
        Box::new(SurrogateLevel::new(
            domain.clone(),
            descent,
            settings.surrogate,
            settings.sample_spacing,
        )?),
        Box::new(FullLevel::new(oracle, domain.clone(), descent)),
    ];
    Hierarchy::new(levels, domain, settings.tol_grad, adaptation_enabled)
}

/// The full level alone: plain multistart descent.
pub fn full_only_hierarchy(
    oracle: Rc<ObjectiveOracle>,
    domain: ParameterDomain,
    settings: &OptSettings,
) -> Result<OptHierarchy> {
    settings.validate()?;
    let levels: Vec<BoxedLevel<OptOutput, OptPayload>> =
        vec![Box::new(FullLevel::new(oracle, domain.clone(), settings.descent()))];
    Hierarchy::new(levels, domain, 0.0, false)
}
