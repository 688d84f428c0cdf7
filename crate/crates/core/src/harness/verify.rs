//! Self-checks of the parabolic building blocks, runnable from the command line.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DVector;

use super::{RunConfig, Scenario};
use crate::error::{Error, Result};
use crate::fom::{AffineSystem, FomSettings, InitialCondition, Source};
use crate::parameter::{ParameterDomain, ParameterStream, ParameterVector};
use crate::rb::{extend_basis, PodSettings, Producer, ReducedBasis, ReducedSystem, ReducedTrajectory};

/// The analytic check passes when the nodal error is at most this times `h^2 + dt`.
pub const ANALYTIC_CONSTANT: f64 = 1.0;
/// Relative agreement required between online and full-space residual norms.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-8;
/// Absolute slack of the rigor check.
pub const RIGOR_SLACK: f64 = 1e-10;

const RESIDUAL_TRIALS: usize = 10;
const RIGOR_TRIALS: usize = 20;
const BASIS_SOLVES: usize = 4;
/// Largest basis used by the residual and rigor checks.
const CHECK_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Corrupts the online residual factor so the residual check must fail.
    pub sabotage_online: bool,
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{status} {}: {}", c.name, c.detail);
        }
        out
    }
}

/// Maximum nodal error of the full-order model for `u0 = sin(pi x)`, `f = 0`
/// and unit diffusivity, whose exact solution is `exp(-pi^2 t) sin(pi x)`.
pub fn heat_mode_error(n_h: usize, k_steps: usize, t_final: f64) -> Result<f64> {
    let sys = AffineSystem::assemble(&FomSettings {
        n_h,
        k_steps,
        t_final,
        q: 1,
        source: Source::Zero,
        u0: InitialCondition::Sine,
    })?;
    let traj = sys.solve(&ParameterVector::new(vec![1.0]))?;
    let decay = (-PI * PI * t_final).exp();
    Ok((0..n_h)
        .map(|i| (traj.final_state()[i] - decay * (PI * sys.node(i)).sin()).abs())
        .fold(0.0, f64::max))
}

/// `|r|_{X'}` through a direct solve with the full Gram matrix.
fn full_dual_norm(sys: &AffineSystem, r: &DVector<f64>) -> Result<f64> {
    let factor = sys
        .gram
        .factor()
        .ok_or_else(|| Error::Numerical("Gram matrix is singular".into()))?;
    Ok(factor.solve(r).dot(r).max(0.0).sqrt())
}

/// Residual norms of every time step, assembled in the full space.
pub fn full_residual_norms(
    sys: &AffineSystem,
    basis: &ReducedBasis,
    mu: &ParameterVector,
    trajectory: &ReducedTrajectory,
) -> Result<Vec<f64>> {
    let v = basis.vectors();
    let states: Vec<DVector<f64>> = trajectory.coefficients.iter().map(|a| v * a).collect();
    states
        .windows(2)
        .map(|w| {
            let mut r = sys.load.clone();
            r -= sys.mass.mul_vec(&(&w[1] - &w[0])) / sys.dt;
            for (a, m) in sys.stiffness.iter().zip(mu.values()) {
                r -= a.mul_vec(&w[1]) * *m;
            }
            full_dual_norm(sys, &r)
        })
        .collect()
}

struct Sampler {
    params: ParameterStream,
    noise: ParameterStream,
}

impl Sampler {
    fn new(domain: ParameterDomain, seed: u64) -> Result<Self> {
        Ok(Sampler {
            params: ParameterStream::new(domain, seed),
            noise: ParameterStream::new(ParameterDomain::uniform(1, -1.0, 1.0)?, seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    fn coefficients(&mut self, n: usize, steps: usize) -> Vec<DVector<f64>> {
        (0..=steps)
            .map(|_| DVector::from_fn(n, |_, _| self.noise.draw().get(0)))
            .collect()
    }
}

fn check_analytic(config: &RunConfig) -> Result<Check> {
    let f = &config.fom;
    let err = heat_mode_error(f.n_h, f.k_steps, f.t_final)?;
    let h = 1.0 / (f.n_h + 1) as f64;
    let dt = f.t_final / f.k_steps as f64;
    let bound = ANALYTIC_CONSTANT * (h * h + dt);
    Ok(Check {
        name: "fom analytic",
        passed: err <= bound,
        detail: format!("max nodal error {err:.3e}, bound {bound:.3e} at n_h = {}, K = {}", f.n_h, f.k_steps),
    })
}

/// Convergence order at a fixed resolution, independent of the config.
fn check_refinement() -> Result<Check> {
    let (n_h, k, t) = (100, 1000, 0.1);
    let coarse = heat_mode_error(n_h, k, t)?;
    let fine = heat_mode_error(2 * n_h + 1, 4 * k, t)?;
    let ratio = coarse / fine;
    Ok(Check {
        name: "fom refinement",
        passed: (3.2..=4.8).contains(&ratio) && coarse <= 1e-3,
        detail: format!("error {coarse:.3e} at n_h = {n_h}, K = {k}; ratio {ratio:.3} under (2 n_h + 1, 4 K)"),
    })
}

fn build_basis(sys: &AffineSystem, sampler: &mut Sampler, settings: &PodSettings) -> Result<ReducedBasis> {
    let mut basis = ReducedBasis::empty(sys.n_h);
    for _ in 0..BASIS_SOLVES {
        let traj = sys.solve(&sampler.params.draw())?;
        basis = extend_basis(&basis, sys, &traj, settings)?.basis;
    }
    Ok(basis)
}

fn check_residuals(
    sys: &AffineSystem,
    basis: &ReducedBasis,
    sampler: &mut Sampler,
    options: &VerifyOptions,
) -> Result<Check> {
    let mut reduced = ReducedSystem::build(sys, basis)?;
    if options.sabotage_online {
        reduced.sabotage_online_factor();
    }
    let mut worst = 0.0f64;
    for _ in 0..RESIDUAL_TRIALS {
        let mu = sampler.params.draw();
        let traj = ReducedTrajectory {
            coefficients: sampler.coefficients(basis.dim(), sys.k_steps),
            mu: mu.clone(),
            generation: basis.generation(),
            producer: Producer::Rb,
        };
        let online = reduced.residual_dual_norms(&mu, &traj)?;
        let full = full_residual_norms(sys, basis, &mu, &traj)?;
        for (a, b) in online.iter().zip(&full) {
            worst = worst.max((a - b).abs() / b.max(1e-300));
        }
    }
    Ok(Check {
        name: "offline/online residual",
        passed: worst <= RESIDUAL_TOLERANCE,
        detail: format!(
            "max relative deviation {worst:.3e} over {RESIDUAL_TRIALS} trials with N = {}",
            basis.dim()
        ),
    })
}

fn check_orthonormality(sys: &AffineSystem, sampler: &mut Sampler, settings: &PodSettings) -> Result<Check> {
    let basis = build_basis(sys, sampler, settings)?;
    let defect = basis.orthonormality_defect(&sys.gram);
    Ok(Check {
        name: "basis orthonormality",
        passed: defect <= ORTHONORMALITY_TOLERANCE,
        detail: format!("max |V^T X V - I| = {defect:.3e} with N = {}", basis.dim()),
    })
}

fn check_rigor(sys: &AffineSystem, basis: &ReducedBasis, sampler: &mut Sampler) -> Result<Check> {
    let reduced = ReducedSystem::build(sys, basis)?;
    let mut violations = 0;
    let mut min_effectivity = f64::INFINITY;
    for _ in 0..RIGOR_TRIALS {
        let mu = sampler.params.draw();
        let truth = sys.solve(&mu)?;
        let perturbed = ReducedTrajectory {
            coefficients: sampler.coefficients(basis.dim(), sys.k_steps),
            mu: mu.clone(),
            generation: basis.generation(),
            producer: Producer::Ml,
        };
        for traj in [reduced.solve(&mu)?, perturbed] {
            let delta = reduced.error_estimate(&mu, &traj)?;
            let err = sys.mass_norm(&(truth.final_state() - basis.reconstruct_final(&traj)?));
            if delta < err - RIGOR_SLACK {
                violations += 1;
            }
            min_effectivity = min_effectivity.min(delta / err.max(1e-14));
        }
    }
    Ok(Check {
        name: "estimator rigor",
        passed: violations == 0,
        detail: format!(
            "{violations} violations in {} samples, smallest estimate/error {min_effectivity:.3}",
            2 * RIGOR_TRIALS
        ),
    })
}

/// Runs every check on the config's full-order settings.
pub fn verify(config: &RunConfig, options: &VerifyOptions) -> Result<VerifyReport> {
    let domain = match config.scenario {
        Scenario::Parabolic => {
            config.validate()?;
            config.domain()?
        }
        Scenario::Optdemo => ParameterDomain::uniform(config.fom.q, 0.1, 10.0)?,
    };
    let sys = AffineSystem::assemble(&config.fom).map_err(|e| Error::Config(e.to_string()))?;
    let mut sampler = Sampler::new(domain, config.seed)?;
    let small = PodSettings {
        pod_tol: config.rb.pod_tol,
        n_add_max: CHECK_DIM.div_ceil(BASIS_SOLVES),
        n_max: CHECK_DIM,
    };
    let basis = build_basis(&sys, &mut sampler, &small)?;

    let checks = vec![
        check_analytic(config)?,
        check_refinement()?,
        check_residuals(&sys, &basis, &mut sampler, options)?,
        check_orthonormality(&sys, &mut sampler, &config.rb)?,
        check_rigor(&sys, &basis, &mut sampler)?,
    ];
    Ok(VerifyReport { checks })
}
