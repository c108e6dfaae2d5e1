//! Link-space linearization: working response z and working covariance Γ.
//!
//! Around the current mean μ the first-order expansion of g(y) gives
//! `z_i = g(μ_i) + (y_i − μ_i) g'(μ_i)` with conditional error covariance
//! `Γ = Diag([g'(μ_i)]² Var(Y_i | ξ))`. Γ is kept as its diagonal: all the
//! downstream algebra only ever uses Γ⁻¹ as row weights.

use crate::error::{Error, Result};
use crate::model::{mean_response, FamilyLink};
use crate::scalar::Scalar;
use ndarray::{Array1, ArrayView1};

/// Linearized-model state at one outer iteration.
#[derive(Debug, Clone)]
pub struct WorkingModel<F> {
    /// Working response z.
    pub z: Array1<F>,
    /// Diagonal of Γ, strictly positive.
    pub gamma_diag: Array1<F>,
    /// Mean response the expansion was taken at.
    pub mu: Array1<F>,
    /// Linear predictor the mean came from.
    pub eta: Array1<F>,
    /// Poisson/log clip events observed while forming μ.
    pub n_clipped: usize,
}

/// z_i = g(μ_i) + (y_i − μ_i) g'(μ_i).
pub fn working_response<F: Scalar>(
    y: &ArrayView1<F>,
    mu: &ArrayView1<F>,
    family: &FamilyLink<F>,
) -> Result<Array1<F>> {
    debug_assert_eq!(y.len(), mu.len());
    // identity link: μ + (y − μ) collapses to y itself, bit for bit
    if matches!(family, FamilyLink::GaussianIdentity { .. }) {
        return Ok(y.to_owned());
    }
    let mut z = Array1::<F>::zeros(y.len());
    for i in 0..y.len() {
        let mu_i = family.floor_mu(mu[i]);
        let zi = family.link(mu_i) + (y[i] - mu_i) * family.link_deriv(mu_i);
        if !zi.is_finite() {
            return Err(Error::Linearization { row: i });
        }
        z[i] = zi;
    }
    Ok(z)
}

/// Γ_ii = [g'(μ_i)]² v(μ_i); equals 1/μ_i for Poisson/log (capped at 1/MU_FLOOR
/// through the μ floor) and the dispersion constant for Gaussian/identity.
pub fn working_variance<F: Scalar>(mu: &ArrayView1<F>, family: &FamilyLink<F>) -> Array1<F> {
    mu.mapv(|m| {
        let m = family.floor_mu(m);
        let d = family.link_deriv(m);
        d * d * family.conditional_variance(m)
    })
}

/// Full linearization at the current linear predictor.
pub fn linearize<F: Scalar>(
    y: &ArrayView1<F>,
    eta: &ArrayView1<F>,
    family: &FamilyLink<F>,
) -> Result<WorkingModel<F>> {
    let mr = mean_response(eta, family);
    let z = working_response(y, &mr.mu.view(), family)?;
    let gamma_diag = working_variance(&mr.mu.view(), family);
    Ok(WorkingModel {
        z,
        gamma_diag,
        mu: mr.mu,
        eta: eta.to_owned(),
        n_clipped: mr.n_clipped,
    })
}
