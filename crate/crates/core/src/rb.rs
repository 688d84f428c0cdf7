//! Reduced-basis model: Galerkin projection of the full-order problem onto an
//! X-orthonormal snapshot space that grows by POD-Greedy steps, plus a
//! residual-based a posteriori error bound that is valid for any coefficient
//! trajectory in the reduced space.
//!
//! Offline, the Riesz data of every affine residual term is whitened with the
//! Cholesky factor of `X` and QR-factorized once (`W = Q S`, so `S^T S` is the
//! matrix of cross-Gramians). Online, the dual norm of a residual with
//! coefficient vector `c` is `|S c|`, which costs `O(((Q+1) N)^2)` per time
//! step and never touches `n_h`-sized data.

use std::any::Any;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{AffineSystem, Trajectory};
use crate::hierarchy::{Absorbed, Estimate, Evaluation, ModelLevel};
use crate::linalg::Tridiagonal;
use crate::parabolic::{ParabolicOutput, ParabolicPayload, Solution};
use crate::parameter::ParameterVector;

/// A new mode that loses more than this fraction of its norm to
/// re-orthogonalization is linearly dependent and dropped.
const DEPENDENCE_RATIO: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodSettings {
    pub pod_tol: f64,
    pub n_add_max: usize,
    #[serde(rename = "N_max")]
    pub n_max: usize,
}

impl Default for PodSettings {
    fn default() -> Self {
        PodSettings {
            pod_tol: 1e-7,
            n_add_max: 5,
            n_max: 60,
        }
    }
}

impl PodSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.pod_tol > 0.0 && self.pod_tol < 1.0) {
            return Err(Error::config(format!("pod_tol must lie in (0, 1), got {}", self.pod_tol)));
        }
        if self.n_add_max == 0 || self.n_max == 0 {
            return Err(Error::config("n_add_max and N_max must be positive"));
        }
        Ok(())
    }
}

/// X-orthonormal basis vectors stored as columns.
#[derive(Debug, Clone)]
pub struct ReducedBasis {
    vectors: DMatrix<f64>,
    generation: u64,
}

impl ReducedBasis {
    pub fn empty(n_h: usize) -> Self {
        ReducedBasis {
            vectors: DMatrix::zeros(n_h, 0),
            generation: 0,
        }
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// `max |V^T X V - I|`.
    pub fn orthonormality_defect(&self, gram: &Tridiagonal) -> f64 {
        let xv = gram.mul_mat(&self.vectors);
        let g = self.vectors.tr_mul(&xv);
        (g - DMatrix::identity(self.dim(), self.dim())).amax()
    }

    /// X-orthogonal projection coefficients `V^T X u`.
    pub fn project(&self, gram: &Tridiagonal, u: &DVector<f64>) -> DVector<f64> {
        self.vectors.tr_mul(&gram.mul_vec(u))
    }

    /// `u^k = V a^k` for every step.
    pub fn reconstruct(&self, trajectory: &ReducedTrajectory) -> Result<Trajectory> {
        self.check(trajectory)?;
        Ok(Trajectory {
            states: trajectory.coefficients.iter().map(|a| &self.vectors * a).collect(),
            mu: trajectory.mu.clone(),
            duration_s: 0.0,
        })
    }

    pub fn reconstruct_final(&self, trajectory: &ReducedTrajectory) -> Result<DVector<f64>> {
        self.check(trajectory)?;
        Ok(&self.vectors * trajectory.final_coefficients())
    }

    /// Writes the basis as `n_h` rows by `N` columns, plus a sidecar file
    /// `<path>.meta` holding one JSON line with the generation, `N` and `pod_tol`.
    pub fn write_csv(&self, path: &std::path::Path, pod_tol: f64) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        // An empty basis leaves the file empty rather than writing blank records.
        if self.dim() > 0 {
            for row in self.vectors.row_iter() {
                w.write_record(row.iter().map(|v| v.to_string()))?;
            }
        }
        w.flush()?;
        let meta = serde_json::json!({
            "generation": self.generation,
            "N": self.dim(),
            "pod_tol": pod_tol,
        });
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".meta");
        std::fs::write(sidecar, format!("{meta}\n"))?;
        Ok(())
    }

    fn check(&self, trajectory: &ReducedTrajectory) -> Result<()> {
        if trajectory.generation != self.generation {
            return Err(Error::StaleGeneration {
                expected: self.generation,
                found: trajectory.generation,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Producer {
    Rb,
    Ml,
}

/// Reduced coefficients `a^0..a^K` of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTrajectory {
    pub coefficients: Vec<DVector<f64>>,
    pub mu: ParameterVector,
    pub generation: u64,
    pub producer: Producer,
}

impl ReducedTrajectory {
    pub fn final_coefficients(&self) -> &DVector<f64> {
        self.coefficients.last().expect("at least the initial coefficients")
    }

    /// `[a^0; a^1; ...; a^K]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.coefficients.iter().flat_map(|a| a.iter().copied()).collect()
    }

    pub fn unflatten(
        flat: &[f64],
        dim: usize,
        mu: ParameterVector,
        generation: u64,
        producer: Producer,
    ) -> Result<Self> {
        if dim == 0 || !flat.len().is_multiple_of(dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: flat.len(),
            });
        }
        let coefficients = flat.chunks(dim).map(DVector::from_column_slice).collect();
        Ok(ReducedTrajectory {
            coefficients,
            mu,
            generation,
            producer,
        })
    }
}

/// Galerkin-projected operators and the online residual machinery for one
/// basis generation.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    generation: u64,
    dim: usize,
    dt: f64,
    k_steps: usize,
    pub mass: DMatrix<f64>,
    pub stiffness: Vec<DMatrix<f64>>,
    pub load: DVector<f64>,
    /// `V^T X u0`.
    pub initial: DVector<f64>,
    /// Upper-trapezoidal factor with `|init_factor [1; -a]| = |u0 - V a|_M`.
    init_factor: DMatrix<f64>,
    /// Upper-trapezoidal factor of the residual terms `[F | M V | A_1 V | ... | A_Q V]`
    /// with `|residual_factor c| = |B c|_{X'}`.
    residual_factor: DMatrix<f64>,
}

fn upper_factor(w: DMatrix<f64>) -> DMatrix<f64> {
    if w.ncols() == 0 {
        return DMatrix::zeros(0, 0);
    }
    w.qr().r()
}

impl ReducedSystem {
    pub fn build(fom: &AffineSystem, basis: &ReducedBasis) -> Result<Self> {
        let v = basis.vectors();
        let n = basis.dim();
        let q = fom.n_params();
        let mass_v = fom.mass.mul_mat(v);
        let stiff_v: Vec<DMatrix<f64>> = fom.stiffness.iter().map(|a| a.mul_mat(v)).collect();

        let symmetric = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
        let mass = symmetric(v.tr_mul(&mass_v));
        let stiffness = stiff_v.iter().map(|av| symmetric(v.tr_mul(av))).collect();
        let load = v.tr_mul(&fom.load);
        let initial = basis.project(&fom.gram, &fom.initial);

        let mass_chol = fom
            .mass
            .cholesky()
            .ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))?;
        let mut init_cols = DMatrix::zeros(fom.n_h, 1 + n);
        init_cols.column_mut(0).copy_from(&fom.initial);
        init_cols.columns_mut(1, n).copy_from(v);
        let init_factor = upper_factor(mass_chol.transpose_mul_mat(&init_cols));

        let gram_chol = fom
            .gram
            .cholesky()
            .ok_or_else(|| Error::Numerical("X is not positive definite".into()))?;
        let p = 1 + n * (q + 1);
        let mut terms = DMatrix::zeros(fom.n_h, p);
        terms.column_mut(0).copy_from(&fom.load);
        terms.columns_mut(1, n).copy_from(&mass_v);
        for (i, av) in stiff_v.iter().enumerate() {
            terms.columns_mut(1 + n * (i + 1), n).copy_from(av);
        }
        gram_chol.forward_solve_mat(&mut terms);
        let residual_factor = upper_factor(terms);

        Ok(ReducedSystem {
            generation: basis.generation(),
            dim: n,
            dt: fom.dt,
            k_steps: fom.k_steps,
            mass,
            stiffness,
            load,
            initial,
            init_factor,
            residual_factor,
        })
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.stiffness.len()
    }

    /// Cross-Gramians `G_ab = (X^{-1} B_a)^T X (X^{-1} B_b)` of all residual
    /// terms, ordered `F, M V, A_1 V, ..., A_Q V`.
    pub fn cross_gramian(&self) -> DMatrix<f64> {
        self.residual_factor.tr_mul(&self.residual_factor)
    }

    fn check(&self, trajectory: &ReducedTrajectory) -> Result<()> {
        if trajectory.generation != self.generation {
            return Err(Error::StaleGeneration {
                expected: self.generation,
                found: trajectory.generation,
            });
        }
        if trajectory.coefficients.len() != self.k_steps + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.k_steps + 1,
                found: trajectory.coefficients.len(),
            });
        }
        if let Some(a) = trajectory.coefficients.iter().find(|a| a.len() != self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: a.len(),
            });
        }
        Ok(())
    }

    fn check_mu(&self, mu: &ParameterVector) -> Result<()> {
        if mu.dim() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                found: mu.dim(),
            });
        }
        coercivity_lower_bound(mu).map(|_| ())
    }

    /// Reduced implicit Euler with one dense Cholesky factorization.
    pub fn solve(&self, mu: &ParameterVector) -> Result<ReducedTrajectory> {
        self.check_mu(mu)?;
        let n = self.dim;
        let mut coefficients = Vec::with_capacity(self.k_steps + 1);
        coefficients.push(self.initial.clone());
        if n == 0 {
            coefficients.resize(self.k_steps + 1, DVector::zeros(0));
        } else {
            let mut lhs = self.mass.clone();
            for (a, m) in self.stiffness.iter().zip(mu.values()) {
                lhs += a * (self.dt * m);
            }
            let chol = lhs
                .cholesky()
                .ok_or_else(|| Error::Numerical("reduced system matrix is not positive definite".into()))?;
            let forcing = &self.load * self.dt;
            for k in 1..=self.k_steps {
                let mut rhs = &self.mass * &coefficients[k - 1];
                rhs += &forcing;
                chol.solve_mut(&mut rhs);
                coefficients.push(rhs);
            }
        }
        Ok(ReducedTrajectory {
            coefficients,
            mu: mu.clone(),
            generation: self.generation,
            producer: Producer::Rb,
        })
    }

    /// `|r^k|_{X'}` for `k = 1..K`, where
    /// `r^k = F - M V (a^k - a^{k-1}) / dt - sum_q mu_q A_q V a^k`.
    pub fn residual_dual_norms(&self, mu: &ParameterVector, trajectory: &ReducedTrajectory) -> Result<Vec<f64>> {
        self.check(trajectory)?;
        self.check_mu(mu)?;
        let n = self.dim;
        let s = &self.residual_factor;
        let rows = s.nrows();

        // S c = s_F - S_M d / dt - S_A(mu) a^k with S_A(mu) = sum_q mu_q S_q.
        let s_f = s.column(0).into_owned();
        let s_m = s.columns(1, n).into_owned();
        let mut s_a = DMatrix::zeros(rows, n);
        for (i, m) in mu.values().iter().enumerate() {
            s_a += s.columns(1 + n * (i + 1), n) * *m;
        }

        let k_steps = self.k_steps;
        let mut norms = Vec::with_capacity(k_steps);
        if n == 0 {
            norms.resize(k_steps, s_f.norm());
            return Ok(norms);
        }
        // All steps at once: columns k = 1..K of
        // s_F - S_M (A_next - A_prev) / dt - S_A(mu) A_next.
        let mut diff = DMatrix::zeros(n, k_steps);
        let mut next = DMatrix::zeros(n, k_steps);
        let inv_dt = 1.0 / self.dt;
        for k in 1..=k_steps {
            let a = &trajectory.coefficients[k];
            next.set_column(k - 1, a);
            diff.set_column(k - 1, &((a - &trajectory.coefficients[k - 1]) * inv_dt));
        }
        let mut r = &s_m * diff;
        r.gemm(1.0, &s_a, &next, 1.0);
        for col in r.column_iter() {
            norms.push((&s_f - col).norm());
        }
        Ok(norms)
    }

    /// `|u0 - V a^0|_M`.
    pub fn initial_error(&self, a0: &DVector<f64>) -> f64 {
        let mut c = DVector::zeros(1 + self.dim);
        c[0] = 1.0;
        for (i, v) in a0.iter().enumerate() {
            c[1 + i] = -v;
        }
        (&self.init_factor * c).norm()
    }

    /// Upper bound on `|u^K_h(mu) - V a^K|_M`:
    /// `sqrt(|u0 - V a^0|_M^2 + dt / alpha_LB(mu) * sum_k |r^k|_{X'}^2)`.
    pub fn error_estimate(&self, mu: &ParameterVector, trajectory: &ReducedTrajectory) -> Result<f64> {
        let alpha = coercivity_lower_bound(mu)?;
        let norms = self.residual_dual_norms(mu, trajectory)?;
        let init = self.initial_error(&trajectory.coefficients[0]);
        let residual: f64 = norms.iter().map(|r| r * r).sum();
        Ok((init * init + self.dt / alpha * residual).sqrt())
    }

    /// Flips the signs of the first two columns (load and first mass term)
    /// of the online factor. Only for exercising the offline/online check.
    #[doc(hidden)]
    pub fn sabotage_online_factor(&mut self) {
        let mut col = self.residual_factor.column_mut(0);
        col *= -1.0;
        if self.residual_factor.ncols() > 1 {
            let mut col = self.residual_factor.column_mut(1);
            col *= -1.0;
        }
    }
}

/// `min_q mu_q`; exact for `X = sum_q A_q` and `theta_q(mu) = mu_q`.
pub fn coercivity_lower_bound(mu: &ParameterVector) -> Result<f64> {
    let alpha = mu.values().iter().copied().fold(f64::INFINITY, f64::min);
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!(
            "parameter {:?} has a nonpositive component",
            mu.values()
        )));
    }
    Ok(alpha)
}

/// A basis together with the reduced system built from it.
#[derive(Debug, Clone)]
pub struct ReducedSpace {
    pub basis: ReducedBasis,
    pub system: ReducedSystem,
}

impl ReducedSpace {
    pub fn empty(fom: &AffineSystem) -> Result<Self> {
        let basis = ReducedBasis::empty(fom.n_h);
        let system = ReducedSystem::build(fom, &basis)?;
        Ok(ReducedSpace { basis, system })
    }

    pub fn from_basis(fom: &AffineSystem, basis: ReducedBasis) -> Result<Self> {
        let system = ReducedSystem::build(fom, &basis)?;
        Ok(ReducedSpace { basis, system })
    }

    pub fn generation(&self) -> u64 {
        self.basis.generation()
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }
}

/// Outcome of a POD-Greedy step.
#[derive(Debug, Clone)]
pub struct Extension {
    pub basis: ReducedBasis,
    pub added: usize,
}

/// One POD-Greedy step: the X-orthogonal projection errors of all snapshots
/// are compressed by POD in the X inner product and the leading modes are
/// appended until the remaining error energy is at most `pod_tol` times the
/// trajectory's X-energy, at most `n_add_max` modes at a time and `N_max` in
/// total.
pub fn extend_basis(
    basis: &ReducedBasis,
    fom: &AffineSystem,
    trajectory: &Trajectory,
    settings: &PodSettings,
) -> Result<Extension> {
    let unchanged = || Extension {
        basis: basis.clone(),
        added: 0,
    };
    let n_h = fom.n_h;
    if let Some(u) = trajectory.states.iter().find(|u| u.len() != n_h) {
        return Err(Error::DimensionMismatch {
            expected: n_h,
            found: u.len(),
        });
    }
    let capacity = settings.n_add_max.min(settings.n_max.saturating_sub(basis.dim()));
    if capacity == 0 || trajectory.states.is_empty() {
        return Ok(unchanged());
    }

    let snapshots = DMatrix::from_columns(&trajectory.states);
    let x_snapshots = fom.gram.mul_mat(&snapshots);
    let total_energy: f64 = snapshots.component_mul(&x_snapshots).sum();
    if !(total_energy > 0.0) {
        return Ok(unchanged());
    }

    let v = basis.vectors();
    let residual = if basis.dim() == 0 {
        snapshots
    } else {
        let coeffs = v.tr_mul(&x_snapshots);
        snapshots - v * coeffs
    };
    let x_residual = fom.gram.mul_mat(&residual);
    let mut correlation = residual.tr_mul(&x_residual);
    correlation = (&correlation + correlation.transpose()) * 0.5;
    let residual_energy = correlation.trace();
    // Stop once what is left is at most pod_tol of the trajectory's energy;
    // a trajectory already represented that well adds nothing.
    let allowed = settings.pod_tol * total_energy;
    if residual_energy <= allowed {
        return Ok(unchanged());
    }

    let eigen = SymmetricEigen::new(correlation);
    let mut order: Vec<usize> = (0..eigen.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let mut columns: Vec<DVector<f64>> = v.column_iter().map(|c| c.into_owned()).collect();
    let mut x_columns: Vec<DVector<f64>> = columns.iter().map(|c| fom.gram.mul_vec(c)).collect();
    let mut captured = 0.0;
    let mut added = 0;
    for &m in &order {
        if added == capacity || residual_energy - captured <= allowed {
            break;
        }
        let lambda = eigen.eigenvalues[m];
        if !(lambda > 0.0) {
            break;
        }
        captured += lambda;
        let mut mode = &residual * eigen.eigenvectors.column(m) / lambda.sqrt();
        let before = x_norm(&fom.gram, &mode);
        // Two Gram-Schmidt passes in the X inner product.
        for _ in 0..2 {
            for (c, xc) in columns.iter().zip(&x_columns) {
                let coef = xc.dot(&mode);
                mode.axpy(-coef, c, 1.0);
            }
        }
        let norm = x_norm(&fom.gram, &mode);
        if !(norm > DEPENDENCE_RATIO * before) {
            continue;
        }
        mode /= norm;
        x_columns.push(fom.gram.mul_vec(&mode));
        columns.push(mode);
        added += 1;
    }

    if added == 0 {
        return Ok(unchanged());
    }
    Ok(Extension {
        basis: ReducedBasis {
            vectors: DMatrix::from_columns(&columns),
            generation: basis.generation() + 1,
        },
        added,
    })
}

fn x_norm(gram: &Tridiagonal, v: &DVector<f64>) -> f64 {
    v.dot(&gram.mul_vec(v)).max(0.0).sqrt()
}

/// Middle level of the parabolic hierarchy.
pub struct RbLevel {
    fom: Arc<AffineSystem>,
    space: Arc<ReducedSpace>,
    settings: PodSettings,
}

impl RbLevel {
    pub fn new(fom: Arc<AffineSystem>, settings: PodSettings) -> Result<Self> {
        settings.validate()?;
        let space = Arc::new(ReducedSpace::empty(&fom)?);
        Ok(RbLevel { fom, space, settings })
    }

    pub fn space(&self) -> &Arc<ReducedSpace> {
        &self.space
    }

    pub fn settings(&self) -> &PodSettings {
        &self.settings
    }

    /// Error bound for a trajectory in the current reduced space, whichever
    /// level produced it.
    pub fn certify(&self, mu: &ParameterVector, trajectory: &ReducedTrajectory) -> Result<f64> {
        self.space.system.error_estimate(mu, trajectory)
    }

    /// Extends the basis with a full-order trajectory. Returns the new space
    /// when the basis changed.
    pub fn absorb_trajectory(&mut self, trajectory: &Trajectory) -> Result<Option<Arc<ReducedSpace>>> {
        let ext = extend_basis(&self.space.basis, &self.fom, trajectory, &self.settings)?;
        if ext.added == 0 {
            return Ok(None);
        }
        self.space = Arc::new(ReducedSpace::from_basis(&self.fom, ext.basis)?);
        Ok(Some(Arc::clone(&self.space)))
    }
}

impl ModelLevel for RbLevel {
    type Output = ParabolicOutput;
    type Payload = ParabolicPayload;

    fn name(&self) -> &str {
        "rb"
    }

    fn evaluate(&mut self, mu: &ParameterVector) -> Result<Evaluation<ParabolicOutput, ParabolicPayload>> {
        let trajectory = self.space.system.solve(mu)?;
        let final_state = self.space.basis.reconstruct_final(&trajectory)?;
        let qoi = self.fom.qoi(&final_state)?;
        let output = ParabolicOutput {
            qoi,
            final_state,
            solution: Solution::Reduced {
                trajectory: trajectory.clone(),
                space: Arc::clone(&self.space),
            },
        };
        Ok(Evaluation::with_payloads(
            output,
            vec![ParabolicPayload::RbSolution(trajectory)],
        ))
    }

    fn estimate_error(
        &self,
        output: &ParabolicOutput,
        mu: &ParameterVector,
        _next: Option<&dyn ModelLevel<Output = ParabolicOutput, Payload = ParabolicPayload>>,
    ) -> Result<Estimate> {
        match &output.solution {
            Solution::Reduced { trajectory, .. } => Ok(Estimate::Value(self.certify(mu, trajectory)?)),
            Solution::Full(_) => Err(Error::config("reduced level cannot certify a full trajectory")),
        }
    }

    fn absorb(&mut self, payload: &ParabolicPayload) -> Result<Absorbed<ParabolicPayload>> {
        match payload {
            ParabolicPayload::FomTrajectory(trajectory) => Ok(match self.absorb_trajectory(trajectory)? {
                Some(space) => Absorbed::used_and_emit(vec![ParabolicPayload::BasisChanged(space)]),
                None => Absorbed::used(),
            }),
            _ => Ok(Absorbed::ignored()),
        }
    }

    fn is_ready(&self) -> bool {
        self.space.dim() >= 1
    }

    fn state_size(&self) -> usize {
        self.space.dim()
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
