//! Three-stage hierarchy for the parametrized heat equation:
//! kernel surrogate of reduced coefficients, reduced-basis model, full-order model.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fom::{AffineSystem, FomLevel, Trajectory};
use crate::hierarchy::{BoxedLevel, Hierarchy};
use crate::ml::{MlLevel, MlSettings};
use crate::parameter::ParameterDomain;
use crate::rb::{PodSettings, RbLevel, ReducedSpace, ReducedTrajectory};

/// Answer payload of every parabolic level.
#[derive(Debug, Clone)]
pub struct ParabolicOutput {
    /// Integral of the final state.
    pub qoi: f64,
    pub final_state: DVector<f64>,
    pub solution: Solution,
}

#[derive(Debug, Clone)]
pub enum Solution {
    Full(Arc<Trajectory>),
    Reduced {
        trajectory: ReducedTrajectory,
        space: Arc<ReducedSpace>,
    },
}

/// Adaptation data passed down the hierarchy.
#[derive(Debug, Clone)]
pub enum ParabolicPayload {
    /// Full-order trajectory; grows the reduced basis.
    FomTrajectory(Arc<Trajectory>),
    /// Reduced-model solution; training data for the surrogate.
    RbSolution(ReducedTrajectory),
    /// The reduced basis changed; the surrogate must move to the new space.
    BasisChanged(Arc<ReducedSpace>),
}

pub type ParabolicHierarchy = Hierarchy<ParabolicOutput, ParabolicPayload>;

pub const STAGE_ML: usize = 1;
pub const STAGE_RB: usize = 2;
pub const STAGE_FOM: usize = 3;

fn check_domain(system: &AffineSystem, domain: &ParameterDomain) -> Result<()> {
    domain.validate()?;
    if domain.dim() != system.n_params() {
        return Err(Error::config(format!(
            "parameter box has {} components but the problem has Q = {}",
            domain.dim(),
            system.n_params()
        )));
    }
    if domain.lo.iter().any(|lo| !(*lo > 0.0)) {
        return Err(Error::config("diffusivity bounds must be positive"));
    }
    Ok(())
}

/// ML surrogate, reduced basis model and full-order model, cheapest first.
pub fn parabolic_hierarchy(
    system: Arc<AffineSystem>,
    domain: ParameterDomain,
    tolerance: f64,
    pod: PodSettings,
    ml: MlSettings,
    adaptation_enabled: bool,
) -> Result<ParabolicHierarchy> {
    check_domain(&system, &domain)?;
    let levels: Vec<BoxedLevel<ParabolicOutput, ParabolicPayload>> = vec![
        Box::new(MlLevel::new(Arc::clone(&system), domain.clone(), ml)?),
        Box::new(RbLevel::new(Arc::clone(&system), pod)?),
        Box::new(FomLevel::new(system)),
    ];
    Hierarchy::new(levels, domain, tolerance, adaptation_enabled)
}

/// The full-order model alone.
pub fn fom_only_hierarchy(system: Arc<AffineSystem>, domain: ParameterDomain) -> Result<ParabolicHierarchy> {
    check_domain(&system, &domain)?;
    let levels: Vec<BoxedLevel<ParabolicOutput, ParabolicPayload>> = vec![Box::new(FomLevel::new(system))];
    Hierarchy::new(levels, domain, 0.0, false)
}
