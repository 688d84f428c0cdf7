//! Full-order model: P1 finite elements in space and implicit Euler in time
//! for the heat equation on (0, 1) with homogeneous Dirichlet conditions and
//! a diffusivity that is constant on each of `Q` equal subdomains.
//!
//! The operator is affine in the parameter, `A(mu) = sum_q mu_q A_q`, which
//! is what the reduced model needs for its offline/online split.

use std::any::Any;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Absorbed, Estimate, Evaluation, ModelLevel};
use crate::linalg::Tridiagonal;
use crate::parabolic::{ParabolicOutput, ParabolicPayload, Solution};
use crate::parameter::ParameterVector;

/// Right-hand side `f`. `Piecewise` values live on a uniform partition of (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    One,
    Zero,
    Constant(f64),
    Piecewise(Vec<f64>),
}

impl Source {
    fn pieces(&self) -> Vec<(f64, f64, f64)> {
        match self {
            Source::One => vec![(0.0, 1.0, 1.0)],
            Source::Zero => Vec::new(),
            Source::Constant(c) => vec![(0.0, 1.0, *c)],
            Source::Piecewise(values) => {
                let n = values.len() as f64;
                values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64 / n, (i + 1) as f64 / n, *v))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialCondition {
    Zero,
    /// `sin(pi x)` sampled at the nodes.
    Sine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FomSettings {
    pub n_h: usize,
    #[serde(rename = "K")]
    pub k_steps: usize,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "Q")]
    pub q: usize,
    pub source: Source,
    pub u0: InitialCondition,
}

impl Default for FomSettings {
    fn default() -> Self {
        FomSettings {
            n_h: 200,
            k_steps: 100,
            t_final: 1.0,
            q: 2,
            source: Source::One,
            u0: InitialCondition::Zero,
        }
    }
}

/// Assembled, parameter-independent pieces of the discrete problem.
#[derive(Debug, Clone)]
pub struct AffineSystem {
    pub n_h: usize,
    pub h: f64,
    pub k_steps: usize,
    pub dt: f64,
    pub t_final: f64,
    pub mass: Tridiagonal,
    /// One stiffness matrix per subdomain.
    pub stiffness: Vec<Tridiagonal>,
    /// Sum of the subdomain stiffness matrices; the H^1_0 seminorm Gram matrix.
    pub gram: Tridiagonal,
    pub load: DVector<f64>,
    pub initial: DVector<f64>,
    /// `M 1`, so that `qoi_vector . u` approximates the integral of `u`.
    pub qoi_vector: DVector<f64>,
}

/// Solution of one full-order solve.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub mu: ParameterVector,
    pub duration_s: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

// Integral of the hat function centred at `xi` (width h) over (-inf, x].
fn hat_antiderivative(xi: f64, h: f64, x: f64) -> f64 {
    let a = xi - h;
    let b = xi + h;
    if x <= a {
        0.0
    } else if x <= xi {
        (x - a) * (x - a) / (2.0 * h)
    } else if x < b {
        h - (b - x) * (b - x) / (2.0 * h)
    } else {
        h
    }
}

fn overlap(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    (b.min(hi) - a.max(lo)).max(0.0)
}

impl AffineSystem {
    pub fn assemble(settings: &FomSettings) -> Result<Self> {
        let FomSettings {
            n_h,
            k_steps,
            t_final,
            q,
            ..
        } = *settings;
        if q == 0 || n_h < q {
            return Err(Error::config(format!("need n_h >= Q >= 1, got n_h = {n_h}, Q = {q}")));
        }
        if k_steps == 0 {
            return Err(Error::config("need at least one time step"));
        }
        if !(t_final > 0.0 && t_final.is_finite()) {
            return Err(Error::config(format!("final time must be positive, got {t_final}")));
        }
        if let Source::Piecewise(v) = &settings.source {
            if v.is_empty() {
                return Err(Error::config("piecewise source needs at least one value"));
            }
        }

        let h = 1.0 / (n_h + 1) as f64;
        let mut mass = Tridiagonal::zeros(n_h);
        let mut stiffness = vec![Tridiagonal::zeros(n_h); q];

        // Element e spans [e h, (e + 1) h]; its end nodes are interior nodes
        // e - 1 and e in 0-based interior numbering.
        for e in 0..=n_h {
            let left = e.checked_sub(1);
            let right = (e < n_h).then_some(e);
            let m = h / 6.0;
            mass.add_element(left, right, [[2.0 * m, m], [m, 2.0 * m]]);

            let (a, b) = (e as f64 * h, (e + 1) as f64 * h);
            for (sub, a_q) in stiffness.iter_mut().enumerate() {
                let lo = sub as f64 / q as f64;
                let hi = (sub + 1) as f64 / q as f64;
                let w = overlap(a, b, lo, hi) / (h * h);
                if w > 0.0 {
                    a_q.add_element(left, right, [[w, -w], [-w, w]]);
                }
            }
        }

        let mut gram = Tridiagonal::zeros(n_h);
        for a_q in &stiffness {
            gram = gram.add_scaled(1.0, a_q);
        }

        let nodes: Vec<f64> = (1..=n_h).map(|i| i as f64 * h).collect();
        let pieces = settings.source.pieces();
        let load = DVector::from_iterator(
            n_h,
            nodes.iter().map(|&xi| {
                pieces
                    .iter()
                    .map(|&(a, b, c)| c * (hat_antiderivative(xi, h, b) - hat_antiderivative(xi, h, a)))
                    .sum::<f64>()
            }),
        );
        let initial = match settings.u0 {
            InitialCondition::Zero => DVector::zeros(n_h),
            InitialCondition::Sine => {
                DVector::from_iterator(n_h, nodes.iter().map(|x| (std::f64::consts::PI * x).sin()))
            }
        };
        let qoi_vector = mass.mul_vec(&DVector::from_element(n_h, 1.0));

        Ok(AffineSystem {
            n_h,
            h,
            k_steps,
            dt: t_final / k_steps as f64,
            t_final,
            mass,
            stiffness,
            gram,
            load,
            initial,
            qoi_vector,
        })
    }

    pub fn n_params(&self) -> usize {
        self.stiffness.len()
    }

    pub fn node(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.h
    }

    pub(crate) fn check_mu(&self, mu: &ParameterVector) -> Result<()> {
        if mu.dim() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                found: mu.dim(),
            });
        }
        if let Some(v) = mu.values().iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::domain(format!(
                "diffusivity {v} is not positive; the problem loses coercivity"
            )));
        }
        Ok(())
    }

    /// `sum_q mu_q A_q`.
    pub fn operator(&self, mu: &ParameterVector) -> Tridiagonal {
        self.stiffness
            .iter()
            .zip(mu.values())
            .fold(Tridiagonal::zeros(self.n_h), |acc, (a_q, m)| acc.add_scaled(*m, a_q))
    }

    /// Implicit Euler: `(M + dt A(mu)) u^k = M u^{k-1} + dt F`.
    pub fn solve(&self, mu: &ParameterVector) -> Result<Trajectory> {
        self.check_mu(mu)?;
        let start = Instant::now();
        let lhs = self.mass.add_scaled(self.dt, &self.operator(mu));
        let factor = lhs
            .factor()
            .ok_or_else(|| Error::Numerical("singular implicit Euler matrix".into()))?;
        let forcing = &self.load * self.dt;

        let mut states = Vec::with_capacity(self.k_steps + 1);
        states.push(self.initial.clone());
        for k in 1..=self.k_steps {
            let mut next = DVector::zeros(self.n_h);
            self.mass
                .mul_vec_into(states[k - 1].as_slice(), next.as_mut_slice());
            next += &forcing;
            factor.solve_in_place(next.as_mut_slice());
            states.push(next);
        }
        Ok(Trajectory {
            states,
            mu: mu.clone(),
            duration_s: start.elapsed().as_secs_f64(),
        })
    }

    /// `qoi_vector . state`, approximately the integral of the state.
    pub fn qoi(&self, state: &DVector<f64>) -> Result<f64> {
        if state.len() != self.n_h {
            return Err(Error::DimensionMismatch {
                expected: self.n_h,
                found: state.len(),
            });
        }
        Ok(self.qoi_vector.dot(state))
    }

    /// `sqrt(1^T M 1)`, the constant in `|s - s~| <= c * ||e||_M`.
    pub fn qoi_bound_constant(&self) -> f64 {
        self.qoi_vector.sum().sqrt()
    }

    pub fn mass_norm(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.mass.mul_vec(v)).max(0.0).sqrt()
    }
}

/// Writes one row per time step, `n_h` columns each.
pub fn write_trajectory_csv(path: &Path, trajectory: &Trajectory) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for state in &trajectory.states {
        let row: Vec<String> = state.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// The reference level of the parabolic hierarchy. Its answers are never
/// checked; every trajectory it computes is offered to the reduced model.
pub struct FomLevel {
    system: Arc<AffineSystem>,
}

impl FomLevel {
    pub fn new(system: Arc<AffineSystem>) -> Self {
        FomLevel { system }
    }

    pub fn system(&self) -> &Arc<AffineSystem> {
        &self.system
    }
}

impl ModelLevel for FomLevel {
    type Output = ParabolicOutput;
    type Payload = ParabolicPayload;

    fn name(&self) -> &str {
        "fom"
    }

    fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<ParabolicOutput, ParabolicPayload>> {
        let trajectory = Arc::new(self.system.solve(mu)?);
        let final_state = trajectory.final_state().clone();
        let qoi = self.system.qoi(&final_state)?;
        let output = ParabolicOutput {
            qoi,
            final_state,
            solution: Solution::Full(Arc::clone(&trajectory)),
        };
        Ok(Evaluation::with_payloads(
            output,
            vec![ParabolicPayload::FomTrajectory(trajectory)],
        ))
    }

    fn estimate_error(
        &self,
        _: &ParabolicOutput,
        _: &ParameterVector,
        _: Option<&dyn ModelLevel<Output = ParabolicOutput, Payload = ParabolicPayload>>,
    ) -> Result<Estimate> {
        Ok(Estimate::Reference)
    }

    fn absorb(&mut self, _: &ParabolicPayload) -> Result<Absorbed<ParabolicPayload>> {
        Ok(Absorbed::ignored())
    }

    fn is_ready(&self) -> bool {
        true
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
