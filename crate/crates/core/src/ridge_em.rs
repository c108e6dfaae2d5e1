//! Ridge-penalized EM with per-iteration GCV selection of the penalty.
//!
//! One outer iteration:
//!
//! 1. linearize at the current (β, ξ) → working response z, covariance Γ;
//! 2. select λ by minimizing the heteroscedastic GCV criterion
//!    `GCV(λ) = n⁻¹ ‖z − S_λ z‖²_{Γ⁻¹} / [1 − n⁻¹ tr(S_λ)]²`
//!    over a grid (ties toward the larger λ);
//! 3. E-step: posterior moments of ξ at the current θ;
//! 4. M-step: exact argmax of the penalized expected complete log-likelihood —
//!    ridge normal equations for β, `E[ξ₁ᵀξ₁|z]/N` for σ₁², and a profiled
//!    1-D search for ρ with σ₂² concentrated out in closed form;
//! 5. update ξ to its posterior mean at the new θ, then recompute z and Γ.
//!
//! The loop stops when β (sup-norm), σ₁², σ₂² and ρ are all jointly stable in
//! relative change (absolute fallback 1e−8 near zero).

use crate::error::{Error, Result};
use crate::inference::{mean_as_state, GlsContext, HatMatrix, MarginalSolver, PosteriorMoments};
use crate::linalg::Cholesky;
use crate::linearize::{linearize, WorkingModel};
use crate::model::{
    linear_predictor, Ar1Moments, DesignSet, FamilyLink, ModelParams, RandomEffectState,
    RHO_MARGIN,
};
use crate::scalar::Scalar;
use ndarray::{s, Array1, ArrayView1};
use serde::{Deserialize, Serialize};

/// Absolute fallback used by the convergence test for parameters near zero.
pub const ABS_TOL: f64 = 1e-8;

/// Consecutive working-deviance increases tolerated before aborting.
const DIVERGENCE_LIMIT: usize = 10;

/// Relative growth a deviance step needs before it counts as an increase.
/// Healthy fits drift upward by a fraction of a percent per iteration while
/// the variance components shrink toward their fixed point; divergence grows
/// by orders of magnitude.
const DIVERGENCE_GROWTH: f64 = 0.01;

/// The streak only aborts once the deviance has at least doubled since the
/// streak began. Shrinkage phases recovering from an overfit start can climb
/// for many iterations, but with geometrically decaying increments that stay
/// well below this factor.
const DIVERGENCE_FACTOR: f64 = 2.0;

/// Which coefficients the ridge penalty applies to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PenaltyMask<F> {
    /// Penalize βᵀβ wholesale (the formula as written).
    PenalizeAll,
    /// Leave the first column (a declared intercept) unpenalized.
    UnpenalizedFirstColumn,
    /// Explicit nonnegative per-coefficient weights.
    Custom(Vec<F>),
}

impl<F: Scalar> PenaltyMask<F> {
    pub fn resolve(&self, p: usize) -> Result<Array1<F>> {
        match self {
            PenaltyMask::PenalizeAll => Ok(Array1::ones(p)),
            PenaltyMask::UnpenalizedFirstColumn => {
                let mut mask = Array1::ones(p);
                if p > 0 {
                    mask[0] = F::zero();
                }
                Ok(mask)
            }
            PenaltyMask::Custom(weights) => {
                if weights.len() != p {
                    return Err(Error::DimensionMismatch {
                        context: "penalty mask length",
                        expected: p,
                        actual: weights.len(),
                    });
                }
                if weights.iter().any(|w| *w < F::zero() || !w.is_finite()) {
                    return Err(Error::Config(
                        "penalty mask entries must be finite and >= 0".into(),
                    ));
                }
                Ok(Array1::from_vec(weights.clone()))
            }
        }
    }
}

/// Log-spaced default grid 10⁻⁴ … 10⁴ (50 points) plus λ = 0.
pub fn default_lambda_grid<F: Scalar>() -> Vec<F> {
    let mut grid = vec![F::zero()];
    let points = 50;
    for i in 0..points {
        let exponent = -4.0 + 8.0 * i as f64 / (points - 1) as f64;
        grid.push(F::of(10f64.powf(exponent)));
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig<F> {
    /// Candidate penalties; kept sorted ascending.
    pub lambda_grid: Vec<F>,
    pub max_outer_iter: usize,
    /// E/M sweeps per outer linearization (the generic iteration uses one).
    pub inner_em_iter: usize,
    /// Relative tolerance of the joint-stability stopping rule.
    pub tol: F,
    /// Grid points for the profiled ρ search before refinement.
    pub rho_grid_points: usize,
    /// Width tolerance of the golden-section refinement in ρ.
    pub rho_refine_tol: F,
    pub penalty: PenaltyMask<F>,
}

impl<F: Scalar> Default for FitConfig<F> {
    fn default() -> Self {
        Self {
            lambda_grid: default_lambda_grid(),
            max_outer_iter: 200,
            inner_em_iter: 1,
            tol: F::of(1e-6),
            rho_grid_points: 201,
            // well below the stopping tolerance: the golden-section placement
            // may move anywhere within its final bracket between iterations,
            // so the bracket must resolve finer than the stability test
            rho_refine_tol: F::of(1e-9),
            penalty: PenaltyMask::PenalizeAll,
        }
    }
}

impl<F: Scalar> FitConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda grid must be nonempty".into()));
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| *l < F::zero() || !l.is_finite())
        {
            return Err(Error::Config("lambda grid entries must be finite and >= 0".into()));
        }
        if !(self.tol > F::zero()) {
            return Err(Error::Config("tol must be > 0".into()));
        }
        if self.max_outer_iter == 0 || self.inner_em_iter == 0 {
            return Err(Error::Config("iteration counts must be >= 1".into()));
        }
        if self.rho_grid_points < 3 {
            return Err(Error::Config("rho grid needs at least 3 points".into()));
        }
        if !(self.rho_refine_tol > F::zero()) {
            return Err(Error::Config("rho_refine_tol must be > 0".into()));
        }
        Ok(())
    }

    fn sorted_grid(&self) -> Vec<F> {
        let mut grid = self.lambda_grid.clone();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        grid
    }
}

/// Converged fit with its per-iteration diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult<F> {
    pub params: ModelParams<F>,
    pub xi_hat: RandomEffectState<F>,
    /// Selected λ per outer iteration (empty in the high-dimensional flavor).
    pub lambda_path: Vec<F>,
    /// GCV minimum per outer iteration.
    pub gcv_path: Vec<F>,
    /// Full GCV curve per iteration; `None` marks grid points excluded as
    /// degenerate (singular system or tr(S) ≥ n).
    pub gcv_curves: Vec<Vec<Option<F>>>,
    pub n_iter: usize,
    pub converged: bool,
    /// θ snapshot after every outer iteration.
    pub trace: Vec<ModelParams<F>>,
    /// Response deviance at each linearization point.
    pub deviance_path: Vec<F>,
    /// Total Poisson/log linear-predictor clip events.
    pub n_eta_clipped: usize,
}

/// GCV from its raw ingredients; exposed so the formula itself is testable.
pub fn gcv_from_parts<F: Scalar>(
    z: &ArrayView1<F>,
    zhat: &ArrayView1<F>,
    trace_s: F,
    gamma_diag: &ArrayView1<F>,
) -> Result<F> {
    let n = z.len();
    let n_f = F::of_usize(n);
    if trace_s >= n_f {
        return Err(Error::DegenerateFit {
            trace: trace_s.as_f64(),
            n,
        });
    }
    let mut rss = F::zero();
    for i in 0..n {
        let r = z[i] - zhat[i];
        rss += r * r / gamma_diag[i];
    }
    let denom = F::one() - trace_s / n_f;
    Ok(rss / n_f / (denom * denom))
}

/// Heteroscedastic GCV of one hat matrix.
pub fn gcv_score<F: Scalar>(
    z: &ArrayView1<F>,
    hat: &HatMatrix<'_, '_, F>,
    gamma_diag: &ArrayView1<F>,
) -> Result<F> {
    let zhat = hat.apply(z);
    gcv_from_parts(z, &zhat.view(), hat.trace(), gamma_diag)
}

#[derive(Debug, Clone)]
pub struct LambdaSelection<F> {
    pub lambda: F,
    pub gcv: F,
    /// GCV per grid point in ascending-λ order (`None` = excluded).
    pub curve: Vec<Option<F>>,
}

/// Grid argmin of the GCV curve, ties toward the larger λ.
pub fn select_lambda<F: Scalar>(
    working: &WorkingModel<F>,
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    config: &FitConfig<F>,
) -> Result<LambdaSelection<F>> {
    let ctx = GlsContext::new(designs, params, &working.gamma_diag.view())?;
    let mask = config.penalty.resolve(designs.n_fixed())?;
    select_lambda_with(&ctx, working, &config.sorted_grid(), &mask.view())
}

pub(crate) fn select_lambda_with<F: Scalar>(
    ctx: &GlsContext<'_, F>,
    working: &WorkingModel<F>,
    grid: &[F],
    penalty_mask: &ArrayView1<F>,
) -> Result<LambdaSelection<F>> {
    let mut curve = Vec::with_capacity(grid.len());
    let mut best: Option<(F, F)> = None;
    for &lambda in grid {
        let value = ctx
            .hat_matrix(lambda, penalty_mask)
            .ok()
            .and_then(|hat| gcv_score(&working.z.view(), &hat, &working.gamma_diag.view()).ok())
            .filter(|g| g.is_finite());
        if let Some(g) = value {
            // ascending grid, `<=` keeps the larger λ on ties
            if best.is_none_or(|(_, bg)| g <= bg) {
                best = Some((lambda, g));
            }
        }
        curve.push(value);
    }
    match best {
        Some((lambda, gcv)) => Ok(LambdaSelection { lambda, gcv, curve }),
        None => Err(Error::LambdaSelection(
            "every grid point was degenerate or singular".into(),
        )),
    }
}

/// Sufficient statistics of Q_pen gathered in the E-step.
#[derive(Debug, Clone)]
pub struct QPenStats<F> {
    pub posterior: PosteriorMoments<F>,
    /// U E[ξ|z] (length n).
    pub u_mean: Array1<F>,
    /// tr(Uᵀ Γ⁻¹ U · Cov[ξ|z]): the covariance part of the data term.
    pub trace_ugu_cov: F,
    /// E[ξ₁ᵀ ξ₁ | z].
    pub e_xi1_sq: F,
    /// AR(1) sufficient statistics of E[ξ₂ ξ₂ᵀ | z].
    pub ar1: Ar1Moments<F>,
    /// Penalty the E-step was conditioned on.
    pub lambda: F,
    /// ρ of the conditioning θ (kept as an M-step search candidate).
    pub rho_at: F,
}

/// E-step: posterior moments of ξ and the cross-moments the M-step needs,
/// conditioned on the current θ and the selected λ.
pub fn penalized_e_step<F: Scalar>(
    working: &WorkingModel<F>,
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    lambda: F,
) -> Result<QPenStats<F>> {
    let solver = MarginalSolver::new(designs.layout(), params, &working.gamma_diag.view())?;
    Ok(e_step_with_solver(&solver, designs, working, params, lambda))
}

pub(crate) fn e_step_with_solver<F: Scalar>(
    solver: &MarginalSolver<F>,
    designs: &DesignSet<F>,
    working: &WorkingModel<F>,
    params: &ModelParams<F>,
    lambda: F,
) -> QPenStats<F> {
    let residual = &working.z - &designs.x().dot(&params.beta);
    e_step_from_residual(solver, designs, &residual.view(), lambda, params.rho)
}

/// E-step moments from an explicit fixed-effect residual (the high-dimensional
/// flavor forms its predictor from components rather than Xβ).
pub(crate) fn e_step_from_residual<F: Scalar>(
    solver: &MarginalSolver<F>,
    designs: &DesignSet<F>,
    residual: &ArrayView1<F>,
    lambda: F,
    rho_at: F,
) -> QPenStats<F> {
    let posterior = solver.posterior(residual);
    let layout = designs.layout();
    let n_ind = layout.n_individuals();
    let state = mean_as_state(layout, &posterior.mean);
    let u_mean = designs.u_times(&state);
    let trace_ugu_cov = solver.trace_ugu(&posterior.cov);
    let e_xi1_sq = (0..n_ind)
        .map(|a| posterior.second_moment[(a, a)])
        .sum::<F>()
        .max(F::zero());
    let s22 = posterior
        .second_moment
        .slice(s![n_ind.., n_ind..])
        .to_owned();
    let ar1 = Ar1Moments::from_second_moment(&s22);
    QPenStats {
        posterior,
        u_mean,
        trace_ugu_cov,
        e_xi1_sq,
        ar1,
        lambda,
        rho_at,
    }
}

/// `Q_pen(θ, θ^[t])` evaluated at an arbitrary θ given the E-step statistics.
/// Used by stationarity checks and diagnostics; the M-step itself is closed
/// form.
pub fn q_pen<F: Scalar>(
    eval_at: &ModelParams<F>,
    stats: &QPenStats<F>,
    working: &WorkingModel<F>,
    designs: &DesignSet<F>,
    penalty_mask: &ArrayView1<F>,
) -> F {
    let layout = designs.layout();
    let n = layout.n_rows();
    let ln_2pi = F::of(std::f64::consts::TAU).ln();
    let half = F::of(0.5);

    let fitted = designs.x().dot(&eval_at.beta);
    let mut data_quad = F::zero();
    let mut sum_log_gamma = F::zero();
    for i in 0..n {
        let r = working.z[i] - fitted[i] - stats.u_mean[i];
        data_quad += r * r / working.gamma_diag[i];
        sum_log_gamma += working.gamma_diag[i].ln();
    }
    let mut q = -half
        * (F::of_usize(n) * ln_2pi + sum_log_gamma + data_quad + stats.trace_ugu_cov);

    if eval_at.sigma1_sq == F::zero() {
        if stats.e_xi1_sq > F::zero() {
            return F::neg_infinity();
        }
    } else {
        let n_ind = F::of_usize(layout.n_individuals());
        q -= half
            * (n_ind * ln_2pi + n_ind * eval_at.sigma1_sq.ln() + stats.e_xi1_sq / eval_at.sigma1_sq);
    }

    if eval_at.sigma2_sq == F::zero() {
        if stats.ar1.total > F::zero() {
            return F::neg_infinity();
        }
    } else {
        let t_len = F::of_usize(layout.n_times());
        let log_det = t_len * eval_at.sigma2_sq.ln()
            - (F::one() - eval_at.rho * eval_at.rho).ln();
        let quad = stats.ar1.quad_form(eval_at.rho) / eval_at.sigma2_sq;
        q -= half * (t_len * ln_2pi + log_det + quad);
    }

    let penalty: F = eval_at
        .beta
        .iter()
        .zip(penalty_mask.iter())
        .map(|(&b, &m)| m * b * b)
        .sum();
    q - half * stats.lambda * penalty
}

/// Profiled AR(1) objective at ρ with σ₂² concentrated out:
/// −½ [T log σ̂₂²(ρ) − log(1−ρ²) + T], σ̂₂²(ρ) = tr(R(ρ)⁻¹ S₂₂)/T.
fn profiled_rho_objective<F: Scalar>(ar1: &Ar1Moments<F>, n_times: usize, rho: F) -> F {
    let quad = ar1.quad_form(rho);
    if !(quad > F::zero()) || !quad.is_finite() {
        return F::neg_infinity();
    }
    let t_len = F::of_usize(n_times);
    let sigma2 = quad / t_len;
    let half = F::of(0.5);
    -half * (t_len * sigma2.ln() - (F::one() - rho * rho).ln() + t_len)
}

fn golden_section_max<F: Scalar>(
    f: impl Fn(F) -> F,
    mut a: F,
    mut b: F,
    tol: F,
) -> (F, F) {
    let inv_phi = F::of(0.618_033_988_749_894_8);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    let mut guard = 0usize;
    while (b - a) > tol && guard < 200 {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        guard += 1;
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Maximizes the profiled stationary AR(1) objective: grid scan (the previous
/// ρ is always a candidate, so the step never decreases Q) followed by a
/// golden-section refinement around the best grid point.
pub fn profile_rho<F: Scalar>(
    ar1: &Ar1Moments<F>,
    n_times: usize,
    grid_points: usize,
    refine_tol: F,
    previous_rho: F,
) -> Result<(F, F)> {
    if !(ar1.total > F::zero()) {
        // posterior mass of ξ₂ is exactly zero: keep the degenerate block
        return Ok((previous_rho, F::zero()));
    }
    let t_len = F::of_usize(n_times);
    let bound = F::one() - F::of(RHO_MARGIN);
    let obj = |rho: F| profiled_rho_objective(ar1, n_times, rho);

    let g = grid_points.max(3);
    let step = (bound + bound) / F::of_usize(g - 1);
    let grid_rho = |i: usize| (-bound + step * F::of_usize(i)).max(-bound).min(bound);
    let mut best_idx = 0usize;
    let mut best_val = F::neg_infinity();
    for i in 0..g {
        let v = obj(grid_rho(i));
        if v > best_val {
            best_val = v;
            best_idx = i;
        }
    }
    if !best_val.is_finite() {
        return Err(Error::MStep(
            "profiled AR(1) objective is non-finite on the whole grid".into(),
        ));
    }
    let lo = grid_rho(best_idx.saturating_sub(1));
    let hi = grid_rho((best_idx + 1).min(g - 1));
    let (mut rho_hat, mut val_hat) = golden_section_max(obj, lo, hi, refine_tol);
    let grid_best = grid_rho(best_idx);
    if obj(grid_best) > val_hat {
        rho_hat = grid_best;
        val_hat = obj(grid_best);
    }
    // generalized-EM guarantee: never do worse than the previous ρ
    let prev_val = obj(previous_rho);
    if prev_val > val_hat {
        rho_hat = previous_rho;
    }
    rho_hat = rho_hat.max(-bound).min(bound);
    let sigma2 = (ar1.quad_form(rho_hat) / t_len).max(F::zero());
    Ok((rho_hat, sigma2))
}

/// M-step: exact argmax of Q_pen over θ (the three blocks are separable).
pub fn m_step<F: Scalar>(
    stats: &QPenStats<F>,
    designs: &DesignSet<F>,
    working: &WorkingModel<F>,
    lambda: F,
    penalty_mask: &ArrayView1<F>,
    config: &FitConfig<F>,
) -> Result<ModelParams<F>> {
    let layout = designs.layout();
    let p = designs.n_fixed();
    // β: (Xᵀ Γ⁻¹ X + λP) β = Xᵀ Γ⁻¹ (z − U E[ξ|z])
    let x = designs.x();
    let mut xtgx = ndarray::Array2::<F>::zeros((p, p));
    let mut rhs = Array1::<F>::zeros(p);
    for i in 0..layout.n_rows() {
        let w = F::one() / working.gamma_diag[i];
        let target = working.z[i] - stats.u_mean[i];
        for a in 0..p {
            let xa = x[(i, a)];
            rhs[a] += w * xa * target;
            for b in a..p {
                xtgx[(a, b)] += w * xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtgx[(a, b)] = xtgx[(b, a)];
        }
        xtgx[(a, a)] += lambda * penalty_mask[a];
    }
    let beta = Cholesky::new(&xtgx, "M-step normal matrix")
        .map_err(|e| match e {
            Error::NotPositiveDefinite { min_pivot, .. } => Error::Singular(format!(
                "XᵀΓ⁻¹X + λP is singular in the M-step (pivot {min_pivot:e}); try λ > 0"
            )),
            other => other,
        })?
        .solve_vec(&rhs.view());

    let sigma1_sq = (stats.e_xi1_sq / F::of_usize(layout.n_individuals())).max(F::zero());
    let (rho, sigma2_sq) = profile_rho(
        &stats.ar1,
        layout.n_times(),
        config.rho_grid_points,
        config.rho_refine_tol,
        stats.rho_at,
    )?;
    ModelParams::new(beta, sigma1_sq, sigma2_sq, rho)
}

/// Counts consecutive material deviance increases; a streak of ten that has
/// also at least doubled the deviance aborts the fit.
#[derive(Debug, Clone)]
pub(crate) struct DivergenceGuard<F> {
    previous: Option<F>,
    streak: usize,
    streak_start: F,
    trail: Vec<F>,
}

impl<F: Scalar> DivergenceGuard<F> {
    pub(crate) fn new() -> Self {
        Self {
            previous: None,
            streak: 0,
            streak_start: F::zero(),
            trail: Vec::new(),
        }
    }

    pub(crate) fn observe(&mut self, deviance: F) -> Result<()> {
        self.trail.push(deviance);
        if let Some(prev) = self.previous {
            let threshold = prev + F::of(DIVERGENCE_GROWTH) * (F::one() + prev.abs());
            if deviance > threshold {
                if self.streak == 0 {
                    self.streak_start = prev;
                }
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.previous = Some(deviance);
        let blown_up = deviance
            >= F::of(DIVERGENCE_FACTOR) * self.streak_start.abs() + F::of(DIVERGENCE_FACTOR);
        if self.streak >= DIVERGENCE_LIMIT && blown_up {
            let tail = self
                .trail
                .iter()
                .rev()
                .take(self.streak + 2)
                .rev()
                .map(|d| d.as_f64())
                .collect();
            return Err(Error::Diverged {
                count: self.streak,
                trail: tail,
            });
        }
        Ok(())
    }
}

fn group_stable<F: Scalar>(old_mag: F, delta_mag: F, tol: F) -> bool {
    delta_mag <= tol * old_mag || delta_mag <= F::of(ABS_TOL)
}

pub(crate) fn params_stable<F: Scalar>(old: &ModelParams<F>, new: &ModelParams<F>, tol: F) -> bool {
    let beta_old_mag = old
        .beta
        .iter()
        .map(|b| b.abs())
        .fold(F::zero(), |a, b| a.max(b));
    let beta_delta = old
        .beta
        .iter()
        .zip(new.beta.iter())
        .map(|(&a, &b)| (a - b).abs())
        .fold(F::zero(), |a, b| a.max(b));
    group_stable(beta_old_mag, beta_delta, tol)
        && group_stable(old.sigma1_sq.abs(), (old.sigma1_sq - new.sigma1_sq).abs(), tol)
        && group_stable(old.sigma2_sq.abs(), (old.sigma2_sq - new.sigma2_sq).abs(), tol)
        && group_stable(old.rho.abs(), (old.rho - new.rho).abs(), tol)
}

/// Neutral starting point: unpenalized GLM for β ignoring the random effects
/// (ridge fallback if singular), σ² components at 0.1 · Var(working residuals),
/// ρ = 0.
pub fn init_params<F: Scalar>(
    y: &ArrayView1<F>,
    designs: &DesignSet<F>,
    family: &FamilyLink<F>,
) -> Result<ModelParams<F>> {
    let n = designs.layout().n_rows();
    let p = designs.n_fixed();
    let x = designs.x();

    let mu0 = match family {
        FamilyLink::PoissonLog => {
            let ybar = y.iter().copied().sum::<F>() / F::of_usize(n);
            y.mapv(|v| family.floor_mu((v + ybar) * F::of(0.5)))
        }
        FamilyLink::GaussianIdentity { .. } => y.to_owned(),
    };
    let mut eta = mu0.mapv(|m| family.link(m));
    let mut beta = Array1::<F>::zeros(p);
    let mut working = linearize(y, &eta.view(), family)?;
    for _ in 0..25 {
        let mut xtwx = ndarray::Array2::<F>::zeros((p, p));
        let mut rhs = Array1::<F>::zeros(p);
        for i in 0..n {
            let w = F::one() / working.gamma_diag[i];
            for a in 0..p {
                rhs[a] += w * x[(i, a)] * working.z[i];
                for b in a..p {
                    xtwx[(a, b)] += w * x[(i, a)] * x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = match Cholesky::new(&xtwx, "GLM init") {
            Ok(c) => c,
            Err(_) => {
                // ridge fallback for singular designs
                let trace: F = (0..p).map(|j| xtwx[(j, j)]).sum();
                let ridge = F::of(1e-6) * trace / F::of_usize(p.max(1)) + F::of(1e-12);
                for j in 0..p {
                    xtwx[(j, j)] += ridge;
                }
                Cholesky::new(&xtwx, "GLM init (ridged)")?
            }
        };
        let new_beta = chol.solve_vec(&rhs.view());
        let delta = new_beta
            .iter()
            .zip(beta.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), |m, v| m.max(v));
        let scale = new_beta
            .iter()
            .map(|b| b.abs())
            .fold(F::zero(), |m, v| m.max(v));
        beta = new_beta;
        eta = x.dot(&beta);
        working = linearize(y, &eta.view(), family)?;
        if delta <= F::of(1e-8) * (F::one() + scale) {
            break;
        }
    }
    // residual variance of the working response around the GLM fit
    let resid = &working.z - &eta;
    let mean = resid.iter().copied().sum::<F>() / F::of_usize(n);
    let var = resid
        .iter()
        .map(|&r| (r - mean) * (r - mean))
        .sum::<F>()
        / F::of_usize(n);
    let sigma0 = F::of(0.1) * var;
    ModelParams::new(beta, sigma0, sigma0, F::zero())
}

/// Runs the full outer loop on a response vector.
pub fn fit<F: Scalar>(
    y: &ArrayView1<F>,
    designs: &DesignSet<F>,
    family: &FamilyLink<F>,
    config: &FitConfig<F>,
    init: Option<ModelParams<F>>,
) -> Result<FitResult<F>> {
    config.validate()?;
    family.check_response(y)?;
    let layout = designs.layout();
    if y.len() != layout.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "fit: response length",
            expected: layout.n_rows(),
            actual: y.len(),
        });
    }
    let mask = config.penalty.resolve(designs.n_fixed())?;
    let grid = config.sorted_grid();

    let mut params = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => init_params(y, designs, family)?,
    };
    if params.beta.len() != designs.n_fixed() {
        return Err(Error::DimensionMismatch {
            context: "fit: init beta length",
            expected: designs.n_fixed(),
            actual: params.beta.len(),
        });
    }

    let mut xi = RandomEffectState::zeros(layout);
    let mut eta = linear_predictor(designs, &params, &xi);
    let mut guard = DivergenceGuard::new();

    let mut result = FitResult {
        params: params.clone(),
        xi_hat: xi.clone(),
        lambda_path: Vec::new(),
        gcv_path: Vec::new(),
        gcv_curves: Vec::new(),
        n_iter: 0,
        converged: false,
        trace: Vec::new(),
        deviance_path: Vec::new(),
        n_eta_clipped: 0,
    };

    for _outer in 0..config.max_outer_iter {
        let working = linearize(y, &eta.view(), family)?;
        result.n_eta_clipped += working.n_clipped;
        let deviance = family.deviance(y, &working.mu.view());
        result.deviance_path.push(deviance);
        guard.observe(deviance)?;

        let ctx = GlsContext::new(designs, &params, &working.gamma_diag.view())?;
        let selection = select_lambda_with(&ctx, &working, &grid, &mask.view())?;

        // The E-step conditions on the step-(2.b) ridge-GLS coefficients — the
        // EM fixed point in β at the current variance parameters. Conditioning
        // on the previous M-step β instead leaves the exact same fixed point
        // but crawls along the β↔E[ξ|z] ridge at rate 1 − O(1/(n·Var(ξ̄₂))).
        let mut current = params.clone();
        for sweep in 0..config.inner_em_iter {
            let stats = if sweep == 0 {
                current.beta = ctx.ridge_beta(&working.z.view(), selection.lambda, &mask.view())?;
                e_step_with_solver(ctx.solver(), designs, &working, &current, selection.lambda)
            } else {
                let sweep_ctx = GlsContext::new(designs, &current, &working.gamma_diag.view())?;
                current.beta =
                    sweep_ctx.ridge_beta(&working.z.view(), selection.lambda, &mask.view())?;
                e_step_with_solver(sweep_ctx.solver(), designs, &working, &current, selection.lambda)
            };
            current = m_step(
                &stats,
                designs,
                &working,
                selection.lambda,
                &mask.view(),
                config,
            )?;
        }

        // step (3): ξ at the updated θ, then refresh z, Γ jointly from (β, ξ)
        let solver = MarginalSolver::new(layout, &current, &working.gamma_diag.view())?;
        let residual = &working.z - &designs.x().dot(&current.beta);
        xi = mean_as_state(layout, &solver.posterior_mean(&residual.view()));

        let stable = params_stable(&params, &current, config.tol);
        result.lambda_path.push(selection.lambda);
        result.gcv_path.push(selection.gcv);
        result.gcv_curves.push(selection.curve);
        result.trace.push(current.clone());
        result.n_iter += 1;
        params = current;
        eta = linear_predictor(designs, &params, &xi);
        if stable {
            result.converged = true;
            break;
        }
    }

    result.params = params;
    result.xi_hat = xi;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::penalized_marginal_loglik;
    use crate::model::{build_designs, PanelLayout};
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
        Array1::from_shape_fn(n, |_| f64::standard_normal(rng))
    }

    fn rand_mat(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, p), |_| f64::standard_normal(rng))
    }

    fn toy_working(n: usize, rng: &mut ChaCha8Rng) -> WorkingModel<f64> {
        let z = rand_vec(n, rng);
        let gamma = Array1::from_shape_fn(n, |_| 0.4 + f64::standard_normal(rng).abs());
        WorkingModel {
            z: z.clone(),
            gamma_diag: gamma,
            mu: z.clone(),
            eta: z,
            n_clipped: 0,
        }
    }

    #[test]
    fn gcv_formula_edge_cases() {
        let z = array![1.0, -2.0, 0.5, 3.0];
        let gamma = array![1.0, 2.0, 0.5, 1.0];
        // perfect fit with tr(S)/n = 0.5 → 0
        let g = gcv_from_parts(&z.view(), &z.view(), 2.0, &gamma.view()).unwrap();
        assert_eq!(g, 0.0);
        // S = 0 → n⁻¹ ‖z‖²_{Γ⁻¹}
        let zero = Array1::<f64>::zeros(4);
        let g = gcv_from_parts(&z.view(), &zero.view(), 0.0, &gamma.view()).unwrap();
        let expect = z
            .iter()
            .zip(gamma.iter())
            .map(|(&zi, &gi)| zi * zi / gi)
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(g, expect, epsilon = 1e-12);
        // tr(S) ≥ n → degenerate
        assert!(matches!(
            gcv_from_parts(&z.view(), &z.view(), 4.0, &gamma.view()),
            Err(Error::DegenerateFit { .. })
        ));
    }

    #[test]
    fn gcv_matches_classical_homoscedastic_formula() {
        // Γ = I, D = 0: must reproduce the textbook ridge GCV to 1e−10.
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let layout = PanelLayout::new(3, 4).unwrap();
        let x = rand_mat(12, 3, &mut rng);
        let designs = build_designs(layout, x.clone()).unwrap();
        let params = ModelParams::new(Array1::zeros(3), 0.0, 0.0, 0.0).unwrap();
        let gamma = Array1::<f64>::ones(12);
        let z = rand_vec(12, &mut rng);
        let working = WorkingModel {
            z: z.clone(),
            gamma_diag: gamma.clone(),
            mu: z.clone(),
            eta: z.clone(),
            n_clipped: 0,
        };
        let ctx = GlsContext::new(&designs, &params, &gamma.view()).unwrap();
        let mask = Array1::<f64>::ones(3);
        for lambda in [0.0, 0.1, 1.0, 25.0] {
            let hat = ctx.hat_matrix(lambda, &mask.view()).unwrap();
            let got = gcv_score(&working.z.view(), &hat, &working.gamma_diag.view()).unwrap();
            // textbook: S = X (XᵀX + λI)⁻¹ Xᵀ via an independent dense route
            let mut a = x.t().dot(&x);
            for j in 0..3 {
                a[(j, j)] += lambda;
            }
            let a_inv = Cholesky::new(&a, "oracle").unwrap().inverse();
            let s = x.dot(&a_inv).dot(&x.t());
            let fitted = s.dot(&z);
            let rss: f64 = z
                .iter()
                .zip(fitted.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            let tr: f64 = (0..12).map(|i| s[(i, i)]).sum();
            let expect = rss / 12.0 / (1.0 - tr / 12.0).powi(2);
            assert_relative_eq!(got, expect, max_relative = 1e-10);
        }
    }

    #[test]
    fn select_lambda_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layout = PanelLayout::new(3, 4).unwrap();
        let designs = build_designs(layout, rand_mat(12, 3, &mut rng)).unwrap();
        let params = ModelParams::new(Array1::zeros(3), 0.4, 0.3, 0.2).unwrap();
        let working = toy_working(12, &mut rng);
        // single-point grid → that λ
        let config = FitConfig {
            lambda_grid: vec![0.37],
            ..FitConfig::default()
        };
        let sel = select_lambda(&working, &designs, &params, &config).unwrap();
        assert_eq!(sel.lambda, 0.37);
        assert_eq!(sel.curve.len(), 1);
        // full grid: exact argmin, one curve value per grid point
        let config = FitConfig::<f64>::default();
        let sel = select_lambda(&working, &designs, &params, &config).unwrap();
        assert_eq!(sel.curve.len(), config.lambda_grid.len());
        let grid = config.sorted_grid();
        let mask = config.penalty.resolve(3).unwrap();
        let ctx = GlsContext::new(&designs, &params, &working.gamma_diag.view()).unwrap();
        for (i, &lambda) in grid.iter().enumerate() {
            if let Some(g) = sel.curve[i] {
                assert!(g.is_finite());
                let hat = ctx.hat_matrix(lambda, &mask.view()).unwrap();
                let re = gcv_score(&working.z.view(), &hat, &working.gamma_diag.view()).unwrap();
                assert!(re >= sel.gcv, "re-evaluated GCV below the selected minimum");
                assert_relative_eq!(re, g, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn select_lambda_prefers_positive_for_collinear_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let layout = PanelLayout::new(5, 4).unwrap();
        let n = layout.n_rows();
        let base = rand_vec(n, &mut rng);
        let mut x = Array2::<f64>::zeros((n, 3));
        x.column_mut(0).assign(&base);
        // nearly collinear second column
        x.column_mut(1)
            .assign(&(&base + &(rand_vec(n, &mut rng) * 1e-7)));
        x.column_mut(2).assign(&rand_vec(n, &mut rng));
        let designs = build_designs(layout, x).unwrap();
        let params = ModelParams::new(Array1::zeros(3), 0.0, 0.0, 0.0).unwrap();
        let working = toy_working(n, &mut rng);
        let config = FitConfig::<f64>::default();
        let sel = select_lambda(&working, &designs, &params, &config).unwrap();
        assert!(sel.lambda > 0.0);
        if let Some(g0) = sel.curve[0] {
            assert!(g0 > sel.gcv);
        }
    }

    #[test]
    fn e_step_reduces_to_gls_when_prior_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let layout = PanelLayout::new(3, 3).unwrap();
        let designs = build_designs(layout, rand_mat(9, 2, &mut rng)).unwrap();
        let working = toy_working(9, &mut rng);
        let params = ModelParams::new(array![0.2, -0.1], 0.0, 0.0, 0.0).unwrap();
        let stats = penalized_e_step(&working, &designs, &params, 0.0).unwrap();
        assert!(stats.posterior.mean.iter().all(|&m| m == 0.0));
        assert!(stats.u_mean.iter().all(|&m| m == 0.0));
        assert_eq!(stats.e_xi1_sq, 0.0);
        assert_eq!(stats.trace_ugu_cov, 0.0);
    }

    #[test]
    fn e_step_moments_match_sampling_oracle() {
        // 1e5 exact Gaussian draws from the dense-conditioning posterior:
        // the blockwise second-moment statistics agree within 3 standard errors
        use crate::model::random_effect_covariance;
        let mut rng = ChaCha8Rng::seed_from_u64(700);
        let layout = PanelLayout::new(3, 3).unwrap();
        let designs = build_designs(layout, rand_mat(9, 2, &mut rng)).unwrap();
        let working = toy_working(9, &mut rng);
        let params = ModelParams::new(array![0.3, -0.2], 0.6, 0.5, 0.4).unwrap();
        let stats = penalized_e_step(&working, &designs, &params, 0.0).unwrap();

        // independent dense joint-conditioning moments
        let d = random_effect_covariance(layout, &params).unwrap();
        let cross = d.dot(&designs.u().t());
        let v = designs.u().dot(&d).dot(&designs.u().t())
            + Array2::from_diag(&working.gamma_diag);
        let vinv = Cholesky::new(&v, "oracle").unwrap().inverse();
        let resid = &working.z - &designs.x().dot(&params.beta);
        let mean = cross.dot(&vinv).dot(&resid);
        let cov = &d - &cross.dot(&vinv).dot(&cross.t());
        let chol = Cholesky::new(&(&cov + &(Array2::<f64>::eye(6) * 1e-12)), "oracle").unwrap();

        let n_draws = 100_000usize;
        let mut xi1_sq_draws = Vec::with_capacity(n_draws);
        let mut ar1_total_draws = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let eps = rand_vec(6, &mut rng);
            let draw = chol.lower().dot(&eps) + &mean;
            xi1_sq_draws.push(draw[0] * draw[0] + draw[1] * draw[1] + draw[2] * draw[2]);
            ar1_total_draws.push(draw[3] * draw[3] + draw[4] * draw[4] + draw[5] * draw[5]);
        }
        let check = |draws: &[f64], expected: f64| {
            let m = draws.iter().sum::<f64>() / n_draws as f64;
            let var = draws.iter().map(|&d| (d - m) * (d - m)).sum::<f64>() / n_draws as f64;
            let se = (var / n_draws as f64).sqrt();
            assert!(
                (m - expected).abs() < 3.0 * se + 1e-12,
                "sample {m} vs analytic {expected} (se {se})"
            );
        };
        check(&xi1_sq_draws, stats.e_xi1_sq);
        check(&ar1_total_draws, stats.ar1.total);
    }

    #[test]
    fn e_step_second_moment_psd_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let layout = PanelLayout::new(3, 4).unwrap();
        let designs = build_designs(layout, rand_mat(12, 2, &mut rng)).unwrap();
        let working = toy_working(12, &mut rng);
        let params = ModelParams::new(array![0.2, -0.1], 0.7, 0.4, 0.5).unwrap();
        let stats = penalized_e_step(&working, &designs, &params, 0.1).unwrap();
        // E[ξ₂ξ₂ᵀ|z] − E[ξ₂|z]E[ξ₂|z]ᵀ = the ξ₂ covariance block: PSD
        let q = layout.n_random();
        let gap = Array2::from_shape_fn((q, q), |(i, j)| {
            stats.posterior.second_moment[(i, j)]
                - stats.posterior.mean[i] * stats.posterior.mean[j]
        });
        let eigs = crate::linalg::sym_eigenvalues(&gap);
        assert!(eigs[0] >= -1e-10);
    }

    #[test]
    fn m_step_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let layout = PanelLayout::new(4, 5).unwrap();
        let n = layout.n_rows();
        let designs = build_designs(layout, rand_mat(n, 3, &mut rng)).unwrap();
        let working = WorkingModel {
            z: rand_vec(n, &mut rng),
            gamma_diag: Array1::<f64>::ones(n),
            mu: Array1::zeros(n),
            eta: Array1::zeros(n),
            n_clipped: 0,
        };
        let q = layout.n_random();
        // zero posterior: β update must reduce to OLS, σ̂₁² to 0
        let stats = QPenStats {
            posterior: PosteriorMoments {
                mean: Array1::zeros(q),
                cov: Array2::zeros((q, q)),
                second_moment: Array2::zeros((q, q)),
            },
            u_mean: Array1::zeros(n),
            trace_ugu_cov: 0.0,
            e_xi1_sq: 0.0,
            ar1: Ar1Moments {
                total: 0.0,
                interior: 0.0,
                adjacent: 0.0,
            },
            lambda: 0.0,
            rho_at: 0.3,
        };
        let config = FitConfig::<f64>::default();
        let mask = Array1::<f64>::ones(3);
        let out = m_step(&stats, &designs, &working, 0.0, &mask.view(), &config).unwrap();
        let xtx = designs.x().t().dot(designs.x());
        let ols = Cholesky::new(&xtx, "test")
            .unwrap()
            .solve_vec(&designs.x().t().dot(&working.z).view());
        for (a, b) in out.beta.iter().zip(ols.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-10);
        }
        assert_eq!(out.sigma1_sq, 0.0);
        assert_eq!(out.sigma2_sq, 0.0);
        // σ₂² = 0 keeps the previous ρ
        assert_eq!(out.rho, 0.3);
    }

    #[test]
    fn profile_rho_diagonal_moment_prefers_zero() {
        // E[ξ₂ξ₂ᵀ|z] = c·I_T with large T → ρ̂ ≈ 0 and σ̂₂² ≈ c.
        let t = 60usize;
        let c = 0.8;
        let ar1 = Ar1Moments {
            total: c * t as f64,
            interior: c * (t as f64 - 2.0),
            adjacent: 0.0,
        };
        let (rho, sigma2) = profile_rho(&ar1, t, 201, 1e-6, 0.5).unwrap();
        assert!(rho.abs() <= 0.01, "rho = {rho}");
        assert_relative_eq!(sigma2, c, max_relative = 1e-3);
    }

    #[test]
    fn profile_rho_matches_brute_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for t in [4usize, 9, 20] {
            // random PSD second moment
            let half = rand_mat(t, t, &mut rng);
            let s22 = half.t().dot(&half);
            let ar1 = Ar1Moments::from_second_moment(&s22);
            let (rho, _) = profile_rho(&ar1, t, 201, 1e-8, 0.0).unwrap();
            // brute scan over 100k points
            let bound = 1.0 - RHO_MARGIN;
            let mut best = (f64::NEG_INFINITY, 0.0);
            let g = 100_000;
            for i in 0..g {
                let r = -bound + 2.0 * bound * i as f64 / (g - 1) as f64;
                let v = profiled_rho_objective(&ar1, t, r);
                if v > best.0 {
                    best = (v, r);
                }
            }
            assert!(
                (rho - best.1).abs() < 1e-3,
                "profiled {rho} vs brute {}",
                best.1
            );
        }
    }

    #[test]
    fn m_step_is_stationary_point_of_q_pen() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let layout = PanelLayout::new(4, 4).unwrap();
        let n = layout.n_rows();
        let designs = build_designs(layout, rand_mat(n, 3, &mut rng)).unwrap();
        let working = toy_working(n, &mut rng);
        let params = ModelParams::new(rand_vec(3, &mut rng), 0.5, 0.4, 0.3).unwrap();
        let lambda = 0.25;
        let mask = array![0.0, 1.0, 1.0];
        let config = FitConfig::<f64>::default();
        let stats = penalized_e_step(&working, &designs, &params, lambda).unwrap();
        let out = m_step(&stats, &designs, &working, lambda, &mask.view(), &config).unwrap();

        // finite-difference gradient in β and σ₁² at the M-step output
        let base = q_pen(&out, &stats, &working, &designs, &mask.view());
        assert!(base.is_finite());
        for j in 0..3 {
            let h = 1e-5 * (1.0 + out.beta[j].abs());
            let mut plus = out.clone();
            plus.beta[j] += h;
            let mut minus = out.clone();
            minus.beta[j] -= h;
            let grad = (q_pen(&plus, &stats, &working, &designs, &mask.view())
                - q_pen(&minus, &stats, &working, &designs, &mask.view()))
                / (2.0 * h);
            assert!(grad.abs() < 1e-5, "beta[{j}] gradient {grad}");
        }
        let h = 1e-6 * (1.0 + out.sigma1_sq);
        let mut plus = out.clone();
        plus.sigma1_sq += h;
        let mut minus = out.clone();
        minus.sigma1_sq -= h;
        let grad = (q_pen(&plus, &stats, &working, &designs, &mask.view())
            - q_pen(&minus, &stats, &working, &designs, &mask.view()))
            / (2.0 * h);
        assert!(grad.abs() < 1e-5, "sigma1_sq gradient {grad}");
    }

    #[test]
    fn inner_em_is_monotone_in_penalized_marginal_loglik() {
        // quick version of the ascent property (the acceptance suite runs the
        // full 20 × 50 sweep version)
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let config = FitConfig::<f64>::default();
        for _ in 0..3 {
            let layout = PanelLayout::new(4, 4).unwrap();
            let n = layout.n_rows();
            let designs = build_designs(layout, rand_mat(n, 2, &mut rng)).unwrap();
            let working = toy_working(n, &mut rng);
            let lambda = 0.2;
            let mask = Array1::<f64>::ones(2);
            let mut params = ModelParams::new(rand_vec(2, &mut rng), 0.6, 0.5, -0.3).unwrap();
            let mut last = penalized_marginal_loglik(
                &designs,
                &params,
                &working.gamma_diag.view(),
                &working.z.view(),
                lambda,
                &mask.view(),
            )
            .unwrap();
            for _ in 0..10 {
                let stats = penalized_e_step(&working, &designs, &params, lambda).unwrap();
                params = m_step(&stats, &designs, &working, lambda, &mask.view(), &config).unwrap();
                let ll = penalized_marginal_loglik(
                    &designs,
                    &params,
                    &working.gamma_diag.view(),
                    &working.z.view(),
                    lambda,
                    &mask.view(),
                )
                .unwrap();
                assert!(
                    ll >= last - 1e-9 * (1.0 + last.abs()),
                    "penalized marginal log-likelihood decreased: {last} → {ll}"
                );
                last = ll;
            }
        }
    }

    #[test]
    fn divergence_guard_trips_after_ten_increases() {
        let mut guard = DivergenceGuard::<f64>::new();
        guard.observe(10.0).unwrap();
        for k in 0..9 {
            guard.observe(11.0 + k as f64).unwrap();
        }
        let err = guard.observe(100.0).unwrap_err();
        assert!(matches!(err, Error::Diverged { count: 10, .. }));
        // a single decrease resets the streak
        let mut guard = DivergenceGuard::<f64>::new();
        guard.observe(10.0).unwrap();
        for k in 0..9 {
            guard.observe(11.0 + k as f64).unwrap();
        }
        guard.observe(5.0).unwrap();
        for k in 0..9 {
            guard.observe(6.0 + k as f64).unwrap();
        }
    }

    #[test]
    fn fit_zero_variance_response() {
        // y ≡ g⁻¹(c): intercept ≈ c and both variance components collapse.
        let layout = PanelLayout::new(5, 4).unwrap();
        let n = layout.n_rows();
        let designs = build_designs(layout, Array2::<f64>::ones((n, 1))).unwrap();
        let c = 0.7;
        let y = Array1::<f64>::from_elem(n, c); // gaussian/identity target
        let config = FitConfig {
            lambda_grid: vec![0.0],
            max_outer_iter: 300,
            penalty: PenaltyMask::UnpenalizedFirstColumn,
            ..FitConfig::default()
        };
        let family = FamilyLink::gaussian_unit();
        let result = fit(&y.view(), &designs, &family, &config, None).unwrap();
        assert_relative_eq!(result.params.beta[0], c, epsilon = 1e-6);
        assert!(result.params.sigma1_sq < 0.05);
        assert!(result.params.sigma2_sq < 0.05);
    }

    #[test]
    fn fit_equivariance_under_column_scaling() {
        // λ = 0 fixed: scaling a non-intercept column by c scales its β̂ by 1/c
        // and leaves fitted η unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let layout = PanelLayout::new(6, 5).unwrap();
        let n = layout.n_rows();
        let mut x = rand_mat(n, 3, &mut rng);
        for i in 0..n {
            x[(i, 0)] = 1.0;
        }
        let beta_true = array![0.5, 0.4, -0.3];
        let eta_true = x.dot(&beta_true);
        let y = Array1::from_shape_fn(n, |i| eta_true[i] + 0.3 * f64::standard_normal(&mut rng));
        let config = FitConfig {
            lambda_grid: vec![0.0],
            tol: 1e-10,
            max_outer_iter: 500,
            penalty: PenaltyMask::UnpenalizedFirstColumn,
            ..FitConfig::default()
        };
        let family = FamilyLink::gaussian_unit();
        let designs = build_designs(layout, x.clone()).unwrap();
        let fit_a = fit(&y.view(), &designs, &family, &config, None).unwrap();

        let scale = 7.0;
        let mut x_scaled = x.clone();
        for i in 0..n {
            x_scaled[(i, 2)] *= scale;
        }
        let designs_b = build_designs(layout, x_scaled).unwrap();
        let fit_b = fit(&y.view(), &designs_b, &family, &config, None).unwrap();

        assert_relative_eq!(fit_b.params.beta[2], fit_a.params.beta[2] / scale, max_relative = 1e-8);
        assert_relative_eq!(fit_b.params.beta[1], fit_a.params.beta[1], max_relative = 1e-8);
        let eta_a = linear_predictor(&designs, &fit_a.params, &fit_a.xi_hat);
        let eta_b = linear_predictor(&designs_b, &fit_b.params, &fit_b.xi_hat);
        for (a, b) in eta_a.iter().zip(eta_b.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn inner_sweeps_reach_the_same_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let layout = PanelLayout::new(8, 6).unwrap();
        let n = layout.n_rows();
        let mut x = rand_mat(n, 2, &mut rng);
        for i in 0..n {
            x[(i, 0)] = 1.0;
        }
        let designs = build_designs(layout, x).unwrap();
        let eta = designs.x().dot(&array![0.4, 0.3]);
        let xi1 = Array1::from_shape_fn(8, |_| 0.5 * f64::standard_normal(&mut rng));
        let xi2 = Array1::from_shape_fn(6, |_| 0.4 * f64::standard_normal(&mut rng));
        let y = Array1::from_shape_fn(n, |i| {
            eta[i]
                + xi1[layout.individual_of(i)]
                + xi2[layout.time_of(i)]
                + 0.4 * f64::standard_normal(&mut rng)
        });
        let family = FamilyLink::gaussian_unit();
        let base = FitConfig {
            lambda_grid: vec![0.0],
            tol: 1e-9,
            max_outer_iter: 3000,
            penalty: PenaltyMask::UnpenalizedFirstColumn,
            ..FitConfig::default()
        };
        let single = fit(&y.view(), &designs, &family, &base, None).unwrap();
        let multi_config = FitConfig {
            inner_em_iter: 4,
            ..base
        };
        let multi = fit(&y.view(), &designs, &family, &multi_config, None).unwrap();
        assert!(multi.n_iter <= single.n_iter);
        // same fixed point up to the stopping-rule resolution of each path
        for (a, b) in single.params.beta.iter().zip(multi.params.beta.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-4, epsilon = 1e-6);
        }
        // variance components at a zero boundary stop on the slow tail at
        // slightly different spots; absolute agreement is the right scale
        assert_relative_eq!(
            single.params.sigma1_sq,
            multi.params.sigma1_sq,
            max_relative = 1e-3,
            epsilon = 5e-4
        );
        assert_relative_eq!(single.params.rho, multi.params.rho, epsilon = 1e-3);
    }

    #[test]
    fn fit_result_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let layout = PanelLayout::new(8, 6).unwrap();
        let n = layout.n_rows();
        let mut x = rand_mat(n, 2, &mut rng);
        for i in 0..n {
            x[(i, 0)] = 1.0;
        }
        let designs = build_designs(layout, x).unwrap();
        let eta = designs.x().dot(&array![0.3, 0.5]);
        // data with genuine random effects so the EM fixed point is interior
        let xi1 = Array1::from_shape_fn(8, |_| 0.6 * f64::standard_normal(&mut rng));
        let xi2 = Array1::from_shape_fn(6, |_| 0.5 * f64::standard_normal(&mut rng));
        let y = Array1::from_shape_fn(n, |i| {
            eta[i]
                + xi1[layout.individual_of(i)]
                + xi2[layout.time_of(i)]
                + 0.5 * f64::standard_normal(&mut rng)
        });
        let config = FitConfig {
            penalty: PenaltyMask::UnpenalizedFirstColumn,
            ..FitConfig::default()
        };
        let family = FamilyLink::gaussian_unit();
        let result = fit(&y.view(), &designs, &family, &config, None).unwrap();
        assert_eq!(result.lambda_path.len(), result.n_iter);
        assert_eq!(result.gcv_path.len(), result.n_iter);
        assert_eq!(result.trace.len(), result.n_iter);
        assert!(result.converged);
        // converged ⇒ the last two snapshots are jointly stable
        if result.trace.len() >= 2 {
            let a = &result.trace[result.trace.len() - 2];
            let b = &result.trace[result.trace.len() - 1];
            assert!(params_stable(a, b, config.tol));
        }
    }
}
