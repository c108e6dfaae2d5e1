//! Model definition: balanced-panel layout, parameters, family/link pairs,
//! design matrices and the random-effect covariance.
//!
//! The model for a response vector `y` of length `n = N·T` is
//!
//! ```text
//! E(y | ξ) = g⁻¹(η),   η = X β + U ξ,   U = [U₁ | U₂]
//! ξ₁ ~ N(0, σ₁² I_N)                        (individual effect)
//! ξ₂,t+1 = ρ ξ₂,t + ν_t,  ν_t ~ N(0, σ₂²)   (shared AR(1) time effect)
//! ```
//!
//! `σ₂²` is the *innovation* variance of the AR(1) recursion, not the marginal
//! variance of the time effect: the stationary marginal variance is
//! `σ₂² / (1 − ρ²)`. The two are equal only at ρ = 0.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// Stationarity margin: |ρ| must stay below `1 − RHO_MARGIN`.
pub const RHO_MARGIN: f64 = 1e-4;

/// Poisson/log linear predictors are clipped to ±`ETA_CLIP` before
/// exponentiation; clip events are counted, never silent.
pub const ETA_CLIP: f64 = 30.0;

/// Poisson means are floored at `MU_FLOOR` before the link derivative and the
/// working variance are evaluated, bounding the working weights.
pub const MU_FLOOR: f64 = 1e-8;

/// Balanced panel dimensions with the row-ordering contract.
///
/// Row `i` holds (individual `a`, time `t`) with `i = a·T + t` (0-based):
/// individuals outer, time inner. That ordering is what makes
/// `U₁ = I_N ⊗ 1_T` and `U₂ = 1_N ⊗ I_T` exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelLayout {
    n_individuals: usize,
    n_times: usize,
}

impl PanelLayout {
    pub fn new(n_individuals: usize, n_times: usize) -> Result<Self> {
        if n_individuals < 2 {
            return Err(Error::InvalidParameter(format!(
                "panel needs at least 2 individuals, got {n_individuals}"
            )));
        }
        if n_times < 2 {
            return Err(Error::InvalidParameter(format!(
                "panel needs at least 2 time points, got {n_times}"
            )));
        }
        Ok(Self {
            n_individuals,
            n_times,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_rows(&self) -> usize {
        self.n_individuals * self.n_times
    }

    /// Number of random-effect levels `q = N + T`.
    pub fn n_random(&self) -> usize {
        self.n_individuals + self.n_times
    }

    /// Row index of (individual, time), both 0-based.
    pub fn row(&self, individual: usize, time: usize) -> usize {
        debug_assert!(individual < self.n_individuals && time < self.n_times);
        individual * self.n_times + time
    }

    pub fn individual_of(&self, row: usize) -> usize {
        row / self.n_times
    }

    pub fn time_of(&self, row: usize) -> usize {
        row % self.n_times
    }
}

/// θ = (β, σ₁², σ₂², ρ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "F: serde::Serialize",
    deserialize = "F: serde::Deserialize<'de>"
))]
pub struct ModelParams<F> {
    #[serde(with = "crate::serde_arr::array1")]
    pub beta: Array1<F>,
    pub sigma1_sq: F,
    pub sigma2_sq: F,
    pub rho: F,
}

impl<F: Scalar> ModelParams<F> {
    pub fn new(beta: Array1<F>, sigma1_sq: F, sigma2_sq: F, rho: F) -> Result<Self> {
        let params = Self {
            beta,
            sigma1_sq,
            sigma2_sq,
            rho,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("non-finite beta".into()));
        }
        if self.sigma1_sq < F::zero() || !self.sigma1_sq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma1_sq must be finite and >= 0, got {}",
                self.sigma1_sq
            )));
        }
        if self.sigma2_sq < F::zero() || !self.sigma2_sq.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma2_sq must be finite and >= 0, got {}",
                self.sigma2_sq
            )));
        }
        check_rho(self.rho)?;
        Ok(())
    }
}

/// Rejects AR(1) coefficients outside the stationarity margin.
pub fn check_rho<F: Scalar>(rho: F) -> Result<()> {
    let max_abs = F::one() - F::of(RHO_MARGIN);
    if !rho.is_finite() || rho.abs() > max_abs {
        return Err(Error::Stationarity {
            rho: rho.as_f64(),
            max_abs: max_abs.as_f64(),
        });
    }
    Ok(())
}

/// Supported exponential-family / link pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FamilyLink<F> {
    /// Poisson response with log link: v(μ) = μ, g'(μ) = 1/μ.
    PoissonLog,
    /// Gaussian response with identity link and a fixed, known dispersion:
    /// v(μ) = dispersion, g'(μ) = 1.
    GaussianIdentity { dispersion: F },
}

impl<F: Scalar> FamilyLink<F> {
    pub fn gaussian_unit() -> Self {
        FamilyLink::GaussianIdentity {
            dispersion: F::one(),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            FamilyLink::PoissonLog => "poisson",
            FamilyLink::GaussianIdentity { .. } => "gaussian",
        }
    }

    pub fn link_name(&self) -> &'static str {
        match self {
            FamilyLink::PoissonLog => "log",
            FamilyLink::GaussianIdentity { .. } => "identity",
        }
    }

    /// Floors the mean into the admissible range before g, g' and the working
    /// variance are evaluated (Poisson only).
    pub fn floor_mu(&self, mu: F) -> F {
        match self {
            FamilyLink::PoissonLog => mu.max(F::of(MU_FLOOR)),
            FamilyLink::GaussianIdentity { .. } => mu,
        }
    }

    /// Link g(μ).
    pub fn link(&self, mu: F) -> F {
        match self {
            FamilyLink::PoissonLog => self.floor_mu(mu).ln(),
            FamilyLink::GaussianIdentity { .. } => mu,
        }
    }

    /// Link derivative g'(μ).
    pub fn link_deriv(&self, mu: F) -> F {
        match self {
            FamilyLink::PoissonLog => F::one() / self.floor_mu(mu),
            FamilyLink::GaussianIdentity { .. } => F::one(),
        }
    }

    /// Inverse link without any clipping; prefer [`mean_response`] on vectors.
    pub fn inv_link(&self, eta: F) -> F {
        match self {
            FamilyLink::PoissonLog => eta.exp(),
            FamilyLink::GaussianIdentity { .. } => eta,
        }
    }

    /// Conditional variance v(μ) = Var(Y | ξ).
    pub fn conditional_variance(&self, mu: F) -> F {
        match self {
            FamilyLink::PoissonLog => self.floor_mu(mu),
            FamilyLink::GaussianIdentity { dispersion } => *dispersion,
        }
    }

    /// Response deviance Σ d(y_i, μ_i).
    pub fn deviance(&self, y: &ArrayView1<F>, mu: &ArrayView1<F>) -> F {
        debug_assert_eq!(y.len(), mu.len());
        let two = F::of(2.0);
        match self {
            FamilyLink::PoissonLog => y
                .iter()
                .zip(mu.iter())
                .map(|(&yi, &mi)| {
                    let mi = self.floor_mu(mi);
                    let term = if yi > F::zero() {
                        yi * (yi / mi).ln() - (yi - mi)
                    } else {
                        mi
                    };
                    two * term
                })
                .sum(),
            FamilyLink::GaussianIdentity { dispersion } => {
                y.iter()
                    .zip(mu.iter())
                    .map(|(&yi, &mi)| (yi - mi) * (yi - mi))
                    .sum::<F>()
                    / *dispersion
            }
        }
    }

    /// Validates the observed response against the family support.
    pub fn check_response(&self, y: &ArrayView1<F>) -> Result<()> {
        for (i, &yi) in y.iter().enumerate() {
            if !yi.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite response at row {i}"
                )));
            }
            if matches!(self, FamilyLink::PoissonLog) && yi < F::zero() {
                return Err(Error::InvalidParameter(format!(
                    "negative response at row {i} is outside the Poisson support"
                )));
            }
        }
        Ok(())
    }

    /// One response draw with conditional mean `mu`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, mu: F, rng: &mut R) -> F {
        match self {
            FamilyLink::PoissonLog => F::poisson_draw(mu, rng),
            FamilyLink::GaussianIdentity { dispersion } => {
                mu + dispersion.sqrt() * F::standard_normal(rng)
            }
        }
    }
}

/// Fixed and random effect design matrices for one balanced panel.
#[derive(Debug, Clone)]
pub struct DesignSet<F> {
    layout: PanelLayout,
    x: Array2<F>,
    u1: Array2<F>,
    u2: Array2<F>,
    u: Array2<F>,
}

/// Builds the design set, deriving `U₁ = I_N ⊗ 1_T` and `U₂ = 1_N ⊗ I_T`
/// from the row-ordering contract.
pub fn build_designs<F: Scalar>(layout: PanelLayout, x_raw: Array2<F>) -> Result<DesignSet<F>> {
    DesignSet::build(layout, x_raw)
}

impl<F: Scalar> DesignSet<F> {
    pub fn build(layout: PanelLayout, x_raw: Array2<F>) -> Result<Self> {
        let n = layout.n_rows();
        if x_raw.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "build_designs: X row count",
                expected: n,
                actual: x_raw.nrows(),
            });
        }
        if x_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "design matrix contains non-finite entries".into(),
            ));
        }
        let big_n = layout.n_individuals();
        let big_t = layout.n_times();
        let mut u1 = Array2::<F>::zeros((n, big_n));
        let mut u2 = Array2::<F>::zeros((n, big_t));
        let mut u = Array2::<F>::zeros((n, big_n + big_t));
        for row in 0..n {
            let a = layout.individual_of(row);
            let t = layout.time_of(row);
            u1[(row, a)] = F::one();
            u2[(row, t)] = F::one();
            u[(row, a)] = F::one();
            u[(row, big_n + t)] = F::one();
        }
        Ok(Self {
            layout,
            x: x_raw,
            u1,
            u2,
            u,
        })
    }

    pub fn layout(&self) -> PanelLayout {
        self.layout
    }

    pub fn x(&self) -> &Array2<F> {
        &self.x
    }

    pub fn u1(&self) -> &Array2<F> {
        &self.u1
    }

    pub fn u2(&self) -> &Array2<F> {
        &self.u2
    }

    /// Concatenated design `U = [U₁ | U₂]` (n × (N+T)).
    pub fn u(&self) -> &Array2<F> {
        &self.u
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// `U ξ` using the incidence structure (O(n), no matrix product).
    pub fn u_times(&self, xi: &RandomEffectState<F>) -> Array1<F> {
        let n = self.layout.n_rows();
        let mut out = Array1::<F>::zeros(n);
        for row in 0..n {
            out[row] =
                xi.xi1()[self.layout.individual_of(row)] + xi.xi2()[self.layout.time_of(row)];
        }
        out
    }

    /// `U₁ᵀ v` (per-individual sums) and `U₂ᵀ v` (per-time sums) in one pass.
    pub fn ut_times(&self, v: &ArrayView1<F>) -> (Array1<F>, Array1<F>) {
        let mut by_individual = Array1::<F>::zeros(self.layout.n_individuals());
        let mut by_time = Array1::<F>::zeros(self.layout.n_times());
        for row in 0..self.layout.n_rows() {
            by_individual[self.layout.individual_of(row)] += v[row];
            by_time[self.layout.time_of(row)] += v[row];
        }
        (by_individual, by_time)
    }
}

/// ξ = (ξ₁ᵀ, ξ₂ᵀ)ᵀ, split to match `U = [U₁ | U₂]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "F: serde::Serialize",
    deserialize = "F: serde::Deserialize<'de>"
))]
pub struct RandomEffectState<F> {
    #[serde(with = "crate::serde_arr::array1")]
    xi1: Array1<F>,
    #[serde(with = "crate::serde_arr::array1")]
    xi2: Array1<F>,
}

impl<F: Scalar> RandomEffectState<F> {
    pub fn new(xi1: Array1<F>, xi2: Array1<F>) -> Self {
        Self { xi1, xi2 }
    }

    pub fn zeros(layout: PanelLayout) -> Self {
        Self {
            xi1: Array1::zeros(layout.n_individuals()),
            xi2: Array1::zeros(layout.n_times()),
        }
    }

    pub fn from_stacked(layout: PanelLayout, xi: &ArrayView1<F>) -> Result<Self> {
        if xi.len() != layout.n_random() {
            return Err(Error::DimensionMismatch {
                context: "RandomEffectState::from_stacked",
                expected: layout.n_random(),
                actual: xi.len(),
            });
        }
        let n = layout.n_individuals();
        Ok(Self {
            xi1: xi.slice(ndarray::s![..n]).to_owned(),
            xi2: xi.slice(ndarray::s![n..]).to_owned(),
        })
    }

    pub fn xi1(&self) -> &Array1<F> {
        &self.xi1
    }

    pub fn xi2(&self) -> &Array1<F> {
        &self.xi2
    }

    /// Stacked (ξ₁ᵀ, ξ₂ᵀ)ᵀ vector of length N + T.
    pub fn stacked(&self) -> Array1<F> {
        let mut out = Array1::<F>::zeros(self.xi1.len() + self.xi2.len());
        out.slice_mut(ndarray::s![..self.xi1.len()]).assign(&self.xi1);
        out.slice_mut(ndarray::s![self.xi1.len()..]).assign(&self.xi2);
        out
    }
}

/// Stationary AR(1) covariance: `Σ₂[t,s] = σ₂²/(1−ρ²) · ρ^|t−s|`.
pub fn ar1_covariance<F: Scalar>(n_times: usize, rho: F, sigma2_sq: F) -> Result<Array2<F>> {
    check_rho(rho)?;
    if sigma2_sq < F::zero() || !sigma2_sq.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma2_sq must be finite and >= 0, got {sigma2_sq}"
        )));
    }
    let marginal = sigma2_sq / (F::one() - rho * rho);
    let mut cov = Array2::<F>::zeros((n_times, n_times));
    for t in 0..n_times {
        for s in 0..n_times {
            let lag = t.abs_diff(s);
            cov[(t, s)] = marginal * rho.powi(lag as i32);
        }
    }
    Ok(cov)
}

/// Closed-form lower Cholesky factor of the stationary AR(1) covariance.
///
/// Follows the generative recursion: `L[t,0] = σ_m ρᵗ` with σ_m the marginal
/// standard deviation, and `L[t,j] = σ₂ ρ^{t−j}` for 1 ≤ j ≤ t.
pub fn ar1_cholesky_factor<F: Scalar>(n_times: usize, rho: F, sigma2_sq: F) -> Result<Array2<F>> {
    check_rho(rho)?;
    if sigma2_sq < F::zero() || !sigma2_sq.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "sigma2_sq must be finite and >= 0, got {sigma2_sq}"
        )));
    }
    let sigma_marginal = (sigma2_sq / (F::one() - rho * rho)).sqrt();
    let sigma_innov = sigma2_sq.sqrt();
    let mut l = Array2::<F>::zeros((n_times, n_times));
    for t in 0..n_times {
        l[(t, 0)] = sigma_marginal * rho.powi(t as i32);
        for j in 1..=t {
            l[(t, j)] = sigma_innov * rho.powi((t - j) as i32);
        }
    }
    Ok(l)
}

/// log det Σ₂ = T log σ₂² − log(1 − ρ²) for the stationary AR(1).
pub fn ar1_log_det<F: Scalar>(n_times: usize, rho: F, sigma2_sq: F) -> F {
    F::of_usize(n_times) * sigma2_sq.ln() - (F::one() - rho * rho).ln()
}

/// Sufficient statistics of a T×T second-moment matrix (or a squared vector)
/// under the stationary AR(1) precision, which is tridiagonal:
///
/// ```text
/// σ₂² tr(Σ₂⁻¹ S) = Σ_t S_tt + ρ² Σ_{interior t} S_tt − 2ρ Σ_t S_{t,t+1}
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Moments<F> {
    /// Σ_t S_tt over all t.
    pub total: F,
    /// Σ_t S_tt over interior t (excluding the first and last).
    pub interior: F,
    /// Σ_t S_{t,t+1} over adjacent pairs.
    pub adjacent: F,
}

impl<F: Scalar> Ar1Moments<F> {
    pub fn from_vector(xi2: &ArrayView1<F>) -> Self {
        let t_len = xi2.len();
        let total = xi2.iter().map(|&v| v * v).sum();
        let interior = if t_len > 2 {
            xi2.iter()
                .skip(1)
                .take(t_len - 2)
                .map(|&v| v * v)
                .sum()
        } else {
            F::zero()
        };
        let adjacent = (0..t_len.saturating_sub(1))
            .map(|t| xi2[t] * xi2[t + 1])
            .sum();
        Self {
            total,
            interior,
            adjacent,
        }
    }

    pub fn from_second_moment(s22: &Array2<F>) -> Self {
        let t_len = s22.nrows();
        debug_assert_eq!(t_len, s22.ncols());
        let total = (0..t_len).map(|t| s22[(t, t)]).sum();
        let interior = if t_len > 2 {
            (1..t_len - 1).map(|t| s22[(t, t)]).sum()
        } else {
            F::zero()
        };
        let adjacent = (0..t_len.saturating_sub(1))
            .map(|t| s22[(t, t + 1)])
            .sum();
        Self {
            total,
            interior,
            adjacent,
        }
    }

    /// σ₂² · tr(Σ₂(ρ, σ₂²)⁻¹ S) as a function of ρ.
    pub fn quad_form(&self, rho: F) -> F {
        self.total + rho * rho * self.interior - F::of(2.0) * rho * self.adjacent
    }
}

/// Block-diagonal random-effect covariance D = blockdiag(σ₁² I_N, Σ₂).
pub fn random_effect_covariance<F: Scalar>(
    layout: PanelLayout,
    params: &ModelParams<F>,
) -> Result<Array2<F>> {
    params.validate()?;
    let n = layout.n_individuals();
    let t = layout.n_times();
    let sigma2 = ar1_covariance(t, params.rho, params.sigma2_sq)?;
    let mut d = Array2::<F>::zeros((n + t, n + t));
    for i in 0..n {
        d[(i, i)] = params.sigma1_sq;
    }
    for r in 0..t {
        for c in 0..t {
            d[(n + r, n + c)] = sigma2[(r, c)];
        }
    }
    Ok(d)
}

/// η = X β + U ξ.
pub fn linear_predictor<F: Scalar>(
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    xi: &RandomEffectState<F>,
) -> Array1<F> {
    let mut eta = designs.x().dot(&params.beta);
    let layout = designs.layout();
    for row in 0..layout.n_rows() {
        eta[row] += xi.xi1()[layout.individual_of(row)] + xi.xi2()[layout.time_of(row)];
    }
    eta
}

/// Mean response with the Poisson/log overflow guard.
#[derive(Debug, Clone)]
pub struct MeanResponse<F> {
    pub mu: Array1<F>,
    /// Number of rows whose linear predictor was clipped to ±[`ETA_CLIP`].
    pub n_clipped: usize,
}

pub fn mean_response<F: Scalar>(eta: &ArrayView1<F>, family: &FamilyLink<F>) -> MeanResponse<F> {
    match family {
        FamilyLink::PoissonLog => {
            let clip = F::of(ETA_CLIP);
            let mut n_clipped = 0;
            let mu = eta.mapv(|e| {
                if e.abs() > clip {
                    n_clipped += 1;
                    e.signum() * clip
                } else {
                    e
                }
                .exp()
            });
            MeanResponse { mu, n_clipped }
        }
        FamilyLink::GaussianIdentity { .. } => MeanResponse {
            mu: eta.to_owned(),
            n_clipped: 0,
        },
    }
}

/// Complete-data Gaussian log-likelihood of the linearized model:
///
/// ```text
/// L(θ; z, ξ) = log N(z; Xβ + Uξ, Γ) + log N(ξ₁; 0, σ₁² I_N) + log N(ξ₂; 0, Σ₂)
/// ```
///
/// Degenerate variance components contribute −∞ when the corresponding block
/// of ξ is nonzero, and nothing otherwise.
pub fn complete_loglik<F: Scalar>(
    z: &ArrayView1<F>,
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    xi: &RandomEffectState<F>,
    gamma_diag: &ArrayView1<F>,
) -> F {
    let layout = designs.layout();
    let n = layout.n_rows();
    debug_assert_eq!(z.len(), n);
    debug_assert_eq!(gamma_diag.len(), n);
    debug_assert!(gamma_diag.iter().all(|&g| g > F::zero()));
    let ln_2pi = F::of(std::f64::consts::TAU).ln();
    let half = F::of(0.5);

    let eta = linear_predictor(designs, params, xi);
    let mut loglik = F::zero();
    for i in 0..n {
        let r = z[i] - eta[i];
        loglik -= half * (ln_2pi + gamma_diag[i].ln() + r * r / gamma_diag[i]);
    }

    let xi1_sq: F = xi.xi1().iter().map(|&v| v * v).sum();
    if params.sigma1_sq == F::zero() {
        if xi1_sq > F::zero() {
            return F::neg_infinity();
        }
    } else {
        let n_ind = F::of_usize(layout.n_individuals());
        loglik -= half * (n_ind * ln_2pi + n_ind * params.sigma1_sq.ln() + xi1_sq / params.sigma1_sq);
    }

    let moments = Ar1Moments::from_vector(&xi.xi2().view());
    if params.sigma2_sq == F::zero() {
        if moments.total > F::zero() {
            return F::neg_infinity();
        }
    } else {
        let t_len = F::of_usize(layout.n_times());
        let log_det = ar1_log_det(layout.n_times(), params.rho, params.sigma2_sq);
        let quad = moments.quad_form(params.rho) / params.sigma2_sq;
        loglik -= half * (t_len * ln_2pi + log_det + quad);
    }
    loglik
}
