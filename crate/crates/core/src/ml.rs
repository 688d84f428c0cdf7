//! Kernel ridge regression of parameter-to-output maps, and the cheapest
//! level of the parabolic hierarchy, which regresses reduced coefficient
//! trajectories in the reduced model's own space.

use std::any::Any;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::AffineSystem;
use crate::hierarchy::{Absorbed, Estimate, Evaluation, ModelLevel};
use crate::parabolic::{ParabolicOutput, ParabolicPayload, Solution};
use crate::parameter::{ParameterDomain, ParameterVector};
use crate::rb::{Producer, RbLevel, ReducedSpace, ReducedTrajectory};

/// Lengthscale used when the median heuristic has nothing to work with.
pub const FALLBACK_LENGTHSCALE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthscalePolicy {
    /// Median of the pairwise scaled-input distances.
    Median,
    Fixed(f64),
}

/// How inputs are mapped onto the unit box before the kernel sees them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    /// `(mu - lo) / (hi - lo)`.
    Linear,
    /// `(ln mu - ln lo) / (ln hi - ln lo)`; needs a positive box.
    Log,
}

impl InputScaling {
    pub fn check(self, domain: &ParameterDomain) -> Result<()> {
        if self == InputScaling::Log && domain.lo.iter().any(|lo| !(*lo > 0.0)) {
            return Err(Error::config("log input scaling needs positive lower bounds"));
        }
        Ok(())
    }

    pub fn apply(self, domain: &ParameterDomain, mu: &ParameterVector) -> Vec<f64> {
        match self {
            InputScaling::Linear => domain.scale(mu),
            InputScaling::Log => mu
                .values()
                .iter()
                .zip(domain.lo.iter().zip(&domain.hi))
                .map(|(v, (lo, hi))| (v.ln() - lo.ln()) / (hi.ln() - lo.ln()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlSettings {
    pub n_min: usize,
    pub lengthscale: LengthscalePolicy,
    pub ridge: f64,
    pub input_scaling: InputScaling,
}

impl Default for MlSettings {
    fn default() -> Self {
        MlSettings {
            n_min: 10,
            lengthscale: LengthscalePolicy::Median,
            ridge: 1e-8,
            input_scaling: InputScaling::Log,
        }
    }
}

impl MlSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge > 0.0 && self.ridge.is_finite()) {
            return Err(Error::config(format!("ridge must be positive, got {}", self.ridge)));
        }
        if let LengthscalePolicy::Fixed(l) = self.lengthscale {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::config(format!("lengthscale must be positive, got {l}")));
            }
        }
        if self.n_min == 0 {
            return Err(Error::config("n_min must be at least 1"));
        }
        Ok(())
    }
}

/// Input/output pairs with inputs scaled to the unit box.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    domain: ParameterDomain,
    scaling: InputScaling,
    inputs: Vec<ParameterVector>,
    scaled: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    pub generation: u64,
}

impl TrainingSet {
    /// Linear input scaling.
    pub fn new(domain: ParameterDomain) -> Self {
        TrainingSet {
            domain,
            scaling: InputScaling::Linear,
            inputs: Vec::new(),
            scaled: Vec::new(),
            outputs: Vec::new(),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[ParameterVector] {
        &self.inputs
    }

    pub fn scaled_inputs(&self) -> &[Vec<f64>] {
        &self.scaled
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn with_scaling(domain: ParameterDomain, scaling: InputScaling) -> Result<Self> {
        scaling.check(&domain)?;
        Ok(TrainingSet {
            scaling,
            ..TrainingSet::new(domain)
        })
    }

    pub fn domain(&self) -> &ParameterDomain {
        &self.domain
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn output_len(&self) -> Option<usize> {
        self.outputs.first().map(Vec::len)
    }

    /// Adds a pair; an input already present has its output replaced.
    /// Returns whether the input was new.
    pub fn insert(&mut self, mu: ParameterVector, output: Vec<f64>) -> Result<bool> {
        if mu.dim() != self.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dim(),
                found: mu.dim(),
            });
        }
        if let Some(len) = self.output_len() {
            if len != output.len() {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    found: output.len(),
                });
            }
        }
        if let Some(existing) = self.inputs.iter().position(|m| *m == mu) {
            self.outputs[existing] = output;
            return Ok(false);
        }
        self.scaled.push(self.scaling.apply(&self.domain, &mu));
        self.inputs.push(mu);
        self.outputs.push(output);
        Ok(true)
    }

    /// Overwrites the pair at `index`.
    pub fn replace(&mut self, index: usize, mu: ParameterVector, output: Vec<f64>) -> Result<()> {
        if index >= self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: index,
            });
        }
        if mu.dim() != self.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dim(),
                found: mu.dim(),
            });
        }
        if output.len() != self.outputs[index].len() {
            return Err(Error::DimensionMismatch {
                expected: self.outputs[index].len(),
                found: output.len(),
            });
        }
        self.scaled[index] = self.scaling.apply(&self.domain, &mu);
        self.inputs[index] = mu;
        self.outputs[index] = output;
        Ok(())
    }

    /// Replaces every output, keeping the inputs.
    pub fn replace_outputs(&mut self, outputs: Vec<Vec<f64>>, generation: u64) -> Result<()> {
        if outputs.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: outputs.len(),
            });
        }
        if let Some(first) = outputs.first() {
            if let Some(bad) = outputs.iter().find(|o| o.len() != first.len()) {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: bad.len(),
                });
            }
        }
        self.outputs = outputs;
        self.generation = generation;
        Ok(())
    }

    /// Median of all pairwise scaled-input distances, or the fallback when
    /// there are fewer than two inputs or the median is zero.
    pub fn median_distance(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return FALLBACK_LENGTHSCALE;
        }
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(distance_sq(&self.scaled[i], &self.scaled[j]).sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let median = if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        };
        if median > 0.0 {
            median
        } else {
            FALLBACK_LENGTHSCALE
        }
    }

    /// Writes `mu_1..mu_Q, outputs...` per row.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for (mu, out) in self.inputs.iter().zip(&self.outputs) {
            let row: Vec<String> = mu.values().iter().chain(out).map(|v| v.to_string()).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Gaussian-kernel ridge regressor: `W = (K + lambda I)^{-1} Y`.
#[derive(Debug, Clone)]
pub struct KernelRegressor {
    domain: ParameterDomain,
    scaling: InputScaling,
    centers: Vec<Vec<f64>>,
    lengthscale: f64,
    ridge: f64,
    weights: DMatrix<f64>,
    pub generation: u64,
}

impl KernelRegressor {
    /// Fits on the full training set. Fewer than `n_min` pairs is a not-ready error.
    pub fn fit(set: &TrainingSet, policy: LengthscalePolicy, ridge: f64, n_min: usize) -> Result<Self> {
        let n = set.len();
        if n < n_min.max(1) {
            return Err(Error::NotReady(format!(
                "{n} training pairs, at least {n_min} required"
            )));
        }
        if !(ridge > 0.0) {
            return Err(Error::config("ridge must be positive"));
        }
        let lengthscale = match policy {
            LengthscalePolicy::Median => set.median_distance(),
            LengthscalePolicy::Fixed(l) => l,
        };
        let gram = kernel_matrix(set.scaled_inputs(), lengthscale) + DMatrix::identity(n, n) * ridge;
        let m = set.output_len().unwrap_or(0);
        let targets = DMatrix::from_fn(n, m, |i, j| set.outputs()[i][j]);
        // Positive definite in exact arithmetic; a very small ridge can still
        // lose that in floating point.
        let chol = gram.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "kernel matrix with ridge {ridge} is not numerically positive definite"
            ))
        })?;
        // For long outputs one n x n inverse and a matrix product beat m
        // triangular solves by a wide margin; short outputs keep the more
        // accurate direct solve.
        let weights = if m > n { chol.inverse() * targets } else { chol.solve(&targets) };
        Ok(KernelRegressor {
            domain: set.domain().clone(),
            scaling: set.scaling(),
            centers: set.scaled_inputs().to_vec(),
            lengthscale,
            ridge,
            weights,
            generation: set.generation,
        })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn n_train(&self) -> usize {
        self.centers.len()
    }

    pub fn kernel_row(&self, mu: &ParameterVector) -> DVector<f64> {
        let x = self.scaling.apply(&self.domain, mu);
        let denom = 2.0 * self.lengthscale * self.lengthscale;
        DVector::from_iterator(
            self.centers.len(),
            self.centers.iter().map(|c| (-distance_sq(&x, c) / denom).exp()),
        )
    }

    pub fn predict(&self, mu: &ParameterVector) -> DVector<f64> {
        self.weights.tr_mul(&self.kernel_row(mu))
    }

    /// Scalar shortcut for single-output regressors.
    pub fn predict_scalar(&self, mu: &ParameterVector) -> f64 {
        self.kernel_row(mu).dot(&self.weights.column(0))
    }
}

pub fn kernel_matrix(points: &[Vec<f64>], lengthscale: f64) -> DMatrix<f64> {
    let n = points.len();
    let denom = 2.0 * lengthscale * lengthscale;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = (-distance_sq(&points[i], &points[j]) / denom).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// The cheapest parabolic level: predicts whole reduced trajectories and is
/// certified by the reduced model's error estimator.
pub struct MlLevel {
    fom: Arc<AffineSystem>,
    settings: MlSettings,
    space: Option<Arc<ReducedSpace>>,
    training: TrainingSet,
    regressor: Option<KernelRegressor>,
}

impl MlLevel {
    pub fn new(fom: Arc<AffineSystem>, domain: ParameterDomain, settings: MlSettings) -> Result<Self> {
        settings.validate()?;
        Ok(MlLevel {
            fom,
            settings,
            space: None,
            training: TrainingSet::with_scaling(domain, settings.input_scaling)?,
            regressor: None,
        })
    }

    pub fn training_set(&self) -> &TrainingSet {
        &self.training
    }

    pub fn regressor(&self) -> Option<&KernelRegressor> {
        self.regressor.as_ref()
    }

    pub fn space(&self) -> Option<&Arc<ReducedSpace>> {
        self.space.as_ref()
    }

    fn generation(&self) -> Option<u64> {
        self.space.as_ref().map(|s| s.generation())
    }

    fn refit(&mut self) -> Result<()> {
        self.regressor = if self.training.len() >= self.settings.n_min {
            Some(KernelRegressor::fit(
                &self.training,
                self.settings.lengthscale,
                self.settings.ridge,
                self.settings.n_min,
            )?)
        } else {
            None
        };
        Ok(())
    }

    /// Adds a reduced-model solution expressed in the current space.
    /// Returns false if it belongs to another generation.
    pub fn add_solution(&mut self, trajectory: &ReducedTrajectory) -> Result<bool> {
        if Some(trajectory.generation) != self.generation() {
            return Ok(false);
        }
        self.training.generation = trajectory.generation;
        self.training.insert(trajectory.mu.clone(), trajectory.flatten())?;
        self.refit()?;
        Ok(true)
    }

    /// Moves to a new reduced space: every stored input is re-solved with the
    /// reduced model in that space and the regressor is refitted.
    pub fn rebase(&mut self, space: Arc<ReducedSpace>) -> Result<bool> {
        if Some(space.generation()) == self.generation() {
            return Ok(false);
        }
        let outputs = self
            .training
            .inputs()
            .iter()
            .map(|mu| space.system.solve(mu).map(|t| t.flatten()))
            .collect::<Result<Vec<_>>>()?;
        self.training.replace_outputs(outputs, space.generation())?;
        self.space = Some(space);
        self.refit()?;
        Ok(true)
    }

    pub fn predict(&self, mu: &ParameterVector) -> Result<ReducedTrajectory> {
        let (space, regressor) = match (&self.space, &self.regressor) {
            (Some(s), Some(r)) => (s, r),
            _ => return Err(Error::NotReady("surrogate has not been fitted".into())),
        };
        if regressor.generation != space.generation() {
            return Err(Error::StaleGeneration {
                expected: space.generation(),
                found: regressor.generation,
            });
        }
        let flat = regressor.predict(mu);
        ReducedTrajectory::unflatten(flat.as_slice(), space.dim(), mu.clone(), regressor.generation, Producer::Ml)
    }
}

impl ModelLevel for MlLevel {
    type Output = ParabolicOutput;
    type Payload = ParabolicPayload;

    fn name(&self) -> &str {
        "ml"
    }

    fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<ParabolicOutput, ParabolicPayload>> {
        let trajectory = self.predict(mu)?;
        let space = self.space.as_ref().expect("predict checked the space");
        let final_state = space.basis.reconstruct_final(&trajectory)?;
        let qoi = self.fom.qoi(&final_state)?;
        Ok(Evaluation::new(ParabolicOutput {
            qoi,
            final_state,
            solution: Solution::Reduced {
                trajectory,
                space: Arc::clone(space),
            },
        }))
    }

    /// Uses the reduced level's estimator when it is the next level, so the
    /// prediction is certified against the reduced system currently in use.
    fn estimate_error(
        &self,
        output: &ParabolicOutput,
        mu: &ParameterVector,
        next: Option<&dyn ModelLevel<Output = ParabolicOutput, Payload = ParabolicPayload>>,
    ) -> Result<Estimate> {
        let trajectory = match &output.solution {
            Solution::Reduced { trajectory, .. } => trajectory,
            Solution::Full(_) => return Err(Error::config("surrogate level cannot certify a full trajectory")),
        };
        let rb = next.and_then(|level| level.as_any().downcast_ref::<RbLevel>());
        let estimate = match (rb, &self.space) {
            (Some(rb), _) => rb.certify(mu, trajectory)?,
            (None, Some(space)) => space.system.error_estimate(mu, trajectory)?,
            (None, None) => return Err(Error::NotReady("no reduced space to certify against".into())),
        };
        Ok(Estimate::Value(estimate))
    }

    fn absorb(&mut self, payload: &ParabolicPayload) -> Result<Absorbed<ParabolicPayload>> {
        let used = match payload {
            ParabolicPayload::RbSolution(trajectory) => self.add_solution(trajectory)?,
            ParabolicPayload::BasisChanged(space) => {
                self.rebase(Arc::clone(space))?;
                true
            }
            ParabolicPayload::FomTrajectory(_) => false,
        };
        Ok(if used { Absorbed::used() } else { Absorbed::ignored() })
    }

    fn is_ready(&self) -> bool {
        matches!(
            (&self.regressor, self.generation()),
            (Some(r), Some(g)) if r.generation == g
        )
    }

    fn state_size(&self) -> usize {
        self.training.len()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
