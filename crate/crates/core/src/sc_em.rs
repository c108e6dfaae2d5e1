//! Supervised-component regularized EM for the high-dimensional case (p ≫ n).
//!
//! Instead of maximizing a ridge-penalized expected complete log-likelihood,
//! each M-step for the fixed effects extracts components `f = C w`, where `C`
//! holds the principal components of the (centered, unit-scaled) regressors
//! with nonzero eigenvalues. A component direction `w` (‖w‖ = 1) maximizes
//!
//! ```text
//! (1 − s) · Q(γ̂(w)) + s · φ(w),
//! φ(w) = ( Σ_j [cor²(xʲ, f)]^l )^(1/l)
//! ```
//!
//! with Q(γ̂(w)) the expected complete log-likelihood of the linearized model
//! where the fixed-effect predictor is the best (intercept + γ·f) fit to the
//! E-step residual. Higher-rank components add empirical orthogonality
//! constraints `fᵀ f_h = 0` to the earlier ones. Weight s and sharpness l are
//! calibrated by cross-validation over whole individuals.

use crate::error::{Error, Result};
use crate::inference::{mean_as_state, MarginalSolver};
use crate::linalg::{sym_eigen, thin_svd, Cholesky};
use crate::linearize::linearize;
use crate::model::{DesignSet, FamilyLink, ModelParams, PanelLayout, RandomEffectState};
use crate::ridge_em::{
    e_step_from_residual, params_stable, profile_rho, DivergenceGuard, FitConfig, FitResult,
    QPenStats,
};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Principal-component basis of the regressor block.
#[derive(Debug, Clone)]
pub struct ComponentBasis<F> {
    /// Component scores C = U Σ (n × r), centered, mutually orthogonal.
    scores: Array2<F>,
    /// Singular values of the centered-scaled X, descending.
    singular_values: Array1<F>,
    /// Right singular vectors (kept columns × r).
    loadings: Array2<F>,
    /// corr map A = V Σ² so that Xᵀ_cs f = A w for f = C w.
    corr_map: Array2<F>,
    col_means: Array1<F>,
    col_scales: Array1<F>,
    /// Indices of the retained (non-constant) original columns.
    kept: Vec<usize>,
    /// Original column count before dropping constants.
    n_original: usize,
    n_rows: usize,
    /// Constant columns dropped with a warning.
    pub dropped_constant: Vec<usize>,
}

/// Centers and unit-scales the columns of X, drops constant columns, and
/// keeps the principal components with singular value above 1e−10 × largest.
pub fn build_component_basis<F: Scalar>(x_raw: &ArrayView2<F>) -> Result<ComponentBasis<F>> {
    let (n, p) = x_raw.dim();
    if n < 2 {
        return Err(Error::InvalidParameter(
            "component basis needs at least 2 rows".into(),
        ));
    }
    let n_f = F::of_usize(n);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for j in 0..p {
        let col = x_raw.column(j);
        let mean = col.iter().copied().sum::<F>() / n_f;
        let ss: F = col.iter().map(|&v| (v - mean) * (v - mean)).sum();
        let sd = (ss / F::of_usize(n - 1)).sqrt();
        if sd <= F::of(1e-12) * (F::one() + mean.abs()) {
            dropped.push(j);
        } else {
            kept.push(j);
            means.push(mean);
            scales.push(sd);
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidParameter(
            "all regressor columns are constant".into(),
        ));
    }
    let col_means = Array1::from_vec(means);
    let col_scales = Array1::from_vec(scales);
    let mut x_cs = Array2::<F>::zeros((n, kept.len()));
    for (jc, &j) in kept.iter().enumerate() {
        for i in 0..n {
            x_cs[(i, jc)] = (x_raw[(i, j)] - col_means[jc]) / col_scales[jc];
        }
    }
    let svd = thin_svd(&x_cs.view(), F::of(1e-10));
    let r = svd.singular_values.len();
    if r == 0 {
        return Err(Error::InvalidParameter(
            "centered regressor block has rank zero".into(),
        ));
    }
    let mut scores = svd.u.clone();
    for c in 0..r {
        let s = svd.singular_values[c];
        for i in 0..n {
            scores[(i, c)] *= s;
        }
    }
    let mut corr_map = svd.v.clone();
    for c in 0..r {
        let s2 = svd.singular_values[c] * svd.singular_values[c];
        for j in 0..corr_map.nrows() {
            corr_map[(j, c)] *= s2;
        }
    }
    Ok(ComponentBasis {
        scores,
        singular_values: svd.singular_values,
        loadings: svd.v,
        corr_map,
        col_means,
        col_scales,
        kept,
        n_original: p,
        n_rows: n,
        dropped_constant: dropped,
    })
}

impl<F: Scalar> ComponentBasis<F> {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn scores(&self) -> &Array2<F> {
        &self.scores
    }

    pub fn singular_values(&self) -> &Array1<F> {
        &self.singular_values
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    /// f = C w.
    pub fn component(&self, w: &ArrayView1<F>) -> Array1<F> {
        self.scores.dot(w)
    }

    /// ‖f‖² = wᵀ Σ² w without touching the scores.
    fn component_norm_sq(&self, w: &ArrayView1<F>) -> F {
        w.iter()
            .zip(self.singular_values.iter())
            .map(|(&wi, &si)| si * si * wi * wi)
            .sum()
    }

    /// Maps a combined direction in component space back to coefficients on
    /// the original variables plus the matching intercept shift.
    pub fn to_variable_coefficients(&self, w_combined: &ArrayView1<F>) -> (Array1<F>, F) {
        let theta_cs = self.loadings.dot(w_combined);
        let mut coefs = Array1::<F>::zeros(self.n_original);
        let mut intercept_shift = F::zero();
        for (jc, &j) in self.kept.iter().enumerate() {
            let c = theta_cs[jc] / self.col_scales[jc];
            coefs[j] = c;
            intercept_shift -= c * self.col_means[jc];
        }
        (coefs, intercept_shift)
    }
}

/// Structural relevance φ(w) = (Σ_j [cor²(xʲ, Cw)]^l)^{1/l}.
pub fn structural_relevance<F: Scalar>(
    basis: &ComponentBasis<F>,
    w: &ArrayView1<F>,
    l: F,
) -> Result<F> {
    if l < F::one() {
        return Err(Error::InvalidParameter(format!("l must be >= 1, got {l}")));
    }
    let f_norm_sq = basis.component_norm_sq(w);
    if !(f_norm_sq > F::zero()) {
        return Err(Error::DegenerateComponent);
    }
    let denom = F::of_usize(basis.n_rows - 1) * f_norm_sq;
    let v = basis.corr_map.dot(w);
    let total: F = v
        .iter()
        .map(|&vj| {
            let c = vj * vj / denom;
            c.powf(l)
        })
        .sum();
    Ok(total.powf(F::one() / l))
}

/// Gradient of φ with respect to w.
fn structural_relevance_grad<F: Scalar>(
    basis: &ComponentBasis<F>,
    w: &ArrayView1<F>,
    l: F,
) -> Array1<F> {
    let f_norm_sq = basis.component_norm_sq(w);
    let denom = F::of_usize(basis.n_rows - 1) * f_norm_sq;
    let v = basis.corr_map.dot(w);
    let c = v.mapv(|vj| vj * vj / denom);
    let s_sum: F = c.iter().map(|&cj| cj.powf(l)).sum();
    if !(s_sum > F::zero()) {
        return Array1::zeros(w.len());
    }
    // dφ/dw = S^{1/l − 1} Σ_j c_j^{l−1} dc_j/dw
    let c_pow: Array1<F> = if l == F::one() {
        Array1::ones(c.len())
    } else {
        c.mapv(|cj| cj.powf(l - F::one()))
    };
    let weighted_v = Array1::from_shape_fn(v.len(), |j| c_pow[j] * v[j]);
    let term1 = basis.corr_map.t().dot(&weighted_v) * (F::of(2.0) / denom);
    let cl_sum: F = c
        .iter()
        .zip(c_pow.iter())
        .map(|(&cj, &cp)| cj * cp)
        .sum();
    let sigma2_w = Array1::from_shape_fn(w.len(), |i| {
        basis.singular_values[i] * basis.singular_values[i] * w[i]
    });
    let term2 = sigma2_w * (F::of(2.0) * cl_sum / f_norm_sq);
    (term1 - term2) * s_sum.powf(F::one() / l - F::one())
}

/// Weighted (intercept, γ) regression of the target on one component.
/// Returns the coefficients and the weighted residual sum of squares.
fn rank_one_fit<F: Scalar>(
    f: &Array1<F>,
    target: &ArrayView1<F>,
    gamma_inv: &ArrayView1<F>,
) -> Option<(F, F, F)> {
    let n = f.len();
    let mut s11 = F::zero();
    let mut s1f = F::zero();
    let mut sff = F::zero();
    let mut s1t = F::zero();
    let mut sft = F::zero();
    for i in 0..n {
        let w = gamma_inv[i];
        s11 += w;
        s1f += w * f[i];
        sff += w * f[i] * f[i];
        s1t += w * target[i];
        sft += w * f[i] * target[i];
    }
    let det = s11 * sff - s1f * s1f;
    if !(det > F::epsilon() * s11 * sff) {
        return None;
    }
    let alpha = (sff * s1t - s1f * sft) / det;
    let gamma = (s11 * sft - s1f * s1t) / det;
    let mut rss = F::zero();
    for i in 0..n {
        let r = target[i] - alpha - gamma * f[i];
        rss += gamma_inv[i] * r * r;
    }
    Some((alpha, gamma, rss))
}

/// The two pieces of the component criterion at one direction.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveParts<F> {
    /// Expected complete log-likelihood at the best rank-one fit.
    pub q_value: F,
    /// Structural relevance φ(w).
    pub phi: F,
    /// (1 − s)·q_value + s·φ.
    pub value: F,
}

/// Component criterion `(1−s) Q(γ̂(w)) + s φ(w)`; `q_offset` carries the parts
/// of Q that do not depend on w (priors, trace and normalizing terms), so the
/// value at s = 0 is the full expected complete log-likelihood.
pub fn component_objective<F: Scalar>(
    basis: &ComponentBasis<F>,
    w: &ArrayView1<F>,
    target: &ArrayView1<F>,
    gamma_inv: &ArrayView1<F>,
    q_offset: F,
    s: F,
    l: F,
) -> Result<ObjectiveParts<F>> {
    if s < F::zero() || s > F::one() {
        return Err(Error::InvalidParameter(format!(
            "s must lie in [0, 1], got {s}"
        )));
    }
    let phi = structural_relevance(basis, w, l)?;
    let f = basis.component(w);
    let (_, _, rss) = rank_one_fit(&f, target, gamma_inv).ok_or(Error::DegenerateComponent)?;
    let q_value = q_offset - F::of(0.5) * rss;
    let value = (F::one() - s) * q_value + s * phi;
    Ok(ObjectiveParts { q_value, phi, value })
}

fn objective_grad<F: Scalar>(
    basis: &ComponentBasis<F>,
    w: &ArrayView1<F>,
    target: &ArrayView1<F>,
    gamma_inv: &ArrayView1<F>,
    s: F,
    l: F,
) -> Array1<F> {
    let f = basis.component(w);
    let mut grad = Array1::<F>::zeros(w.len());
    if s < F::one() {
        if let Some((alpha, gamma, _)) = rank_one_fit(&f, target, gamma_inv) {
            // envelope: dQ/df_i = γ̂ w_i (t_i − α̂ − γ̂ f_i)
            let dq_df = Array1::from_shape_fn(f.len(), |i| {
                gamma_inv[i] * gamma * (target[i] - alpha - gamma * f[i])
            });
            grad = basis.scores.t().dot(&dq_df) * (F::one() - s);
        }
    }
    if s > F::zero() {
        grad = grad + structural_relevance_grad(basis, w, l) * s;
    }
    grad
}

/// Orthonormal basis of {w : (Cw)ᵀ f_h = 0 ∀h} inside component space.
/// Since CᵀC = Σ², the constraint vectors are simply Σ² w_h.
fn constraint_complement<F: Scalar>(
    basis: &ComponentBasis<F>,
    previous_w: &[Array1<F>],
) -> Result<Array2<F>> {
    let r = basis.rank();
    let mut constraints: Vec<Array1<F>> = Vec::new();
    for w_h in previous_w {
        let mut a = Array1::from_shape_fn(r, |i| {
            basis.singular_values[i] * basis.singular_values[i] * w_h[i]
        });
        for c in &constraints {
            let proj = a.dot(c);
            a -= &(c * proj);
        }
        let norm = a.dot(&a).sqrt();
        if norm > F::of(1e-12) {
            constraints.push(a / norm);
        }
    }
    let mut complement: Vec<Array1<F>> = Vec::new();
    for i in 0..r {
        let mut v = Array1::<F>::zeros(r);
        v[i] = F::one();
        for c in constraints.iter().chain(complement.iter()) {
            let proj = v.dot(c);
            v -= &(c * proj);
        }
        let norm = v.dot(&v).sqrt();
        if norm > F::of(1e-10) {
            complement.push(v / norm);
        }
    }
    if complement.is_empty() {
        return Err(Error::DegenerateComponent);
    }
    let mut q = Array2::<F>::zeros((r, complement.len()));
    for (j, col) in complement.iter().enumerate() {
        q.column_mut(j).assign(col);
    }
    Ok(q)
}

/// Exact solution of the s = 1, l = 1 case on the constrained subspace: the
/// leading generalized eigenvector of (Σ⁴, (n−1)Σ²) restricted to span(Q).
fn eigen_shortcut<F: Scalar>(basis: &ComponentBasis<F>, q: &Array2<F>) -> Array1<F> {
    let m = q.ncols();
    let r = basis.rank();
    let mut num = Array2::<F>::zeros((m, m));
    let mut den = Array2::<F>::zeros((m, m));
    for a in 0..m {
        for b in 0..m {
            let mut sn = F::zero();
            let mut sd = F::zero();
            for i in 0..r {
                let s2 = basis.singular_values[i] * basis.singular_values[i];
                sn += q[(i, a)] * s2 * s2 * q[(i, b)];
                sd += q[(i, a)] * s2 * q[(i, b)];
            }
            num[(a, b)] = sn;
            den[(a, b)] = sd;
        }
    }
    let chol = Cholesky::new(&den, "eigen shortcut").expect("Σ² restricted to span(Q) is SPD");
    // standard form: L⁻¹ num L⁻ᵀ
    let li_num = {
        // solve L Y = num
        let mut y = num.clone();
        let lmat = chol.lower();
        for col in 0..m {
            for i in 0..m {
                let mut v = y[(i, col)];
                for k in 0..i {
                    v -= lmat[(i, k)] * y[(k, col)];
                }
                y[(i, col)] = v / lmat[(i, i)];
            }
        }
        y
    };
    // now solve L X = li_numᵀ → X = L⁻¹ num L⁻ᵀ (symmetric)
    let li_num_t = li_num.t().to_owned();
    let mut x = li_num_t.clone();
    let lmat = chol.lower();
    for col in 0..m {
        for i in 0..m {
            let mut v = x[(i, col)];
            for k in 0..i {
                v -= lmat[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = v / lmat[(i, i)];
        }
    }
    let sym = (&x + &x.t()) * F::of(0.5);
    let (_, vecs) = sym_eigen(&sym);
    let u = vecs.column(vecs.ncols() - 1).to_owned();
    // back-substitute Lᵀ v = u
    let mut v = u.clone();
    for i in (0..m).rev() {
        let mut val = v[i];
        for k in (i + 1)..m {
            val -= lmat[(k, i)] * v[k];
        }
        v[i] = val / lmat[(i, i)];
    }
    let w = q.dot(&v);
    let norm = w.dot(&w).sqrt();
    w / norm
}

/// Projected gradient ascent on the unit sphere of span(Q); returns the best
/// point, its objective and the accepted-objective trail (non-decreasing).
#[allow(clippy::too_many_arguments)]
fn projected_ascent<F: Scalar>(
    basis: &ComponentBasis<F>,
    q: &Array2<F>,
    v0: &Array1<F>,
    target: &ArrayView1<F>,
    gamma_inv: &ArrayView1<F>,
    s: F,
    l: F,
    max_iter: usize,
    tol: F,
) -> Option<(Array1<F>, F, Vec<F>)> {
    let normalize = |v: &Array1<F>| -> Option<Array1<F>> {
        let norm = v.dot(v).sqrt();
        if norm > F::of(1e-14) {
            Some(v / norm)
        } else {
            None
        }
    };
    let eval = |v: &Array1<F>| -> Option<F> {
        let w = q.dot(v);
        component_objective(basis, &w.view(), target, gamma_inv, F::zero(), s, l)
            .ok()
            .map(|o| o.value)
            .filter(|x| x.is_finite())
    };
    let mut v = normalize(v0)?;
    let mut best = eval(&v)?;
    let mut trail = vec![best];
    let mut step = F::of(0.1);
    for _ in 0..max_iter {
        let w = q.dot(&v);
        let grad_w = objective_grad(basis, &w.view(), target, gamma_inv, s, l);
        let grad_v = q.t().dot(&grad_w);
        let radial = grad_v.dot(&v);
        let tangent = &grad_v - &(&v * radial);
        let tnorm = tangent.dot(&tangent).sqrt();
        if tnorm <= F::of(1e-14) * (F::one() + best.abs()) {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand = match normalize(&(&v + &(&tangent * step))) {
                Some(c) => c,
                None => break,
            };
            match eval(&cand) {
                Some(val) if val > best => {
                    let improvement = val - best;
                    v = cand;
                    best = val;
                    trail.push(best);
                    step *= F::of(1.5);
                    accepted = true;
                    if improvement <= tol * (F::one() + best.abs()) {
                        return Some((v, best, trail));
                    }
                    break;
                }
                _ => {
                    step *= F::of(0.5);
                }
            }
        }
        if !accepted {
            break;
        }
    }
    Some((v, best, trail))
}

/// One extracted component.
#[derive(Debug, Clone)]
pub struct ExtractedComponent<F> {
    pub w: Array1<F>,
    pub f: Array1<F>,
    pub objective: F,
    /// Set when no ascent start improved on its initial objective by the
    /// configured tolerance.
    pub no_improvement: bool,
}

/// Extracts the next component: maximizes the criterion over the unit sphere
/// subject to empirical orthogonality with the previous components.
#[allow(clippy::too_many_arguments)]
pub fn extract_component<F: Scalar>(
    basis: &ComponentBasis<F>,
    previous_w: &[Array1<F>],
    target: &ArrayView1<F>,
    gamma_inv: &ArrayView1<F>,
    s: F,
    l: F,
    config: &ScConfig<F>,
    rng: &mut impl Rng,
) -> Result<ExtractedComponent<F>> {
    let q = constraint_complement(basis, previous_w)?;
    let m = q.ncols();

    if s == F::one() && l == F::one() {
        let w = eigen_shortcut(basis, &q);
        let objective =
            component_objective(basis, &w.view(), target, gamma_inv, F::zero(), s, l)?.value;
        let (w, f) = orient(basis, w, target, gamma_inv);
        return Ok(ExtractedComponent {
            w,
            f,
            objective,
            no_improvement: false,
        });
    }

    // starting points: likelihood direction, the s=1/l=1 eigvector, randoms
    let mut starts: Vec<Array1<F>> = Vec::new();
    let weighted_target = Array1::from_shape_fn(target.len(), |i| target[i] * gamma_inv[i]);
    starts.push(q.t().dot(&basis.scores.t().dot(&weighted_target)));
    starts.push(q.t().dot(&eigen_shortcut(basis, &q)));
    for _ in 0..config.n_restarts {
        starts.push(Array1::from_shape_fn(m, |_| F::standard_normal(rng)));
    }

    let mut best: Option<(Array1<F>, F)> = None;
    let mut improved = false;
    for v0 in &starts {
        if let Some((v, val, trail)) = projected_ascent(
            basis,
            &q,
            v0,
            target,
            gamma_inv,
            s,
            l,
            config.max_opt_iter,
            config.opt_tol,
        ) {
            if trail.len() > 1
                && trail[trail.len() - 1] - trail[0] > config.opt_tol * (F::one() + trail[0].abs())
            {
                improved = true;
            }
            if best.as_ref().is_none_or(|(_, b)| val > *b) {
                best = Some((v, val));
            }
        }
    }
    let (v, objective) = best.ok_or_else(|| {
        Error::MStep("component extraction failed: no admissible direction".into())
    })?;
    let w = q.dot(&v);
    let norm = w.dot(&w).sqrt();
    let (w, f) = orient(basis, w / norm, target, gamma_inv);
    Ok(ExtractedComponent {
        w,
        f,
        objective,
        no_improvement: !improved,
    })
}

/// Deterministic sign: flip so the rank-one regression coefficient is ≥ 0.
fn orient<F: Scalar>(
    basis: &ComponentBasis<F>,
    w: Array1<F>,
    target: &ArrayView1<F>,
    gamma_inv: &ArrayView1<F>,
) -> (Array1<F>, Array1<F>) {
    let f = basis.component(&w.view());
    if let Some((_, gamma, _)) = rank_one_fit(&f, target, gamma_inv) {
        if gamma < F::zero() {
            return (w.mapv(|x| -x), f.mapv(|x| -x));
        }
    }
    (w, f)
}

/// Supervised-component configuration: active (s, l, K) plus the candidate
/// grids and fold count used by cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScConfig<F> {
    pub s: F,
    pub l: F,
    pub n_components: usize,
    pub cv_folds: usize,
    pub s_grid: Vec<F>,
    pub l_grid: Vec<F>,
    pub k_grid: Vec<usize>,
    pub n_restarts: usize,
    pub max_opt_iter: usize,
    pub opt_tol: F,
    pub seed: u64,
}

impl<F: Scalar> Default for ScConfig<F> {
    fn default() -> Self {
        Self {
            s: F::of(0.5),
            l: F::one(),
            n_components: 2,
            cv_folds: 5,
            s_grid: vec![F::zero(), F::of(0.5), F::of(0.9)],
            l_grid: vec![F::one(), F::of(2.0), F::of(4.0)],
            k_grid: vec![1, 2, 3],
            n_restarts: 20,
            max_opt_iter: 300,
            opt_tol: F::of(1e-8),
            seed: 0,
        }
    }
}

impl<F: Scalar> ScConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.s < F::zero() || self.s > F::one() {
            return Err(Error::Config(format!("s must lie in [0,1], got {}", self.s)));
        }
        if self.l < F::one() {
            return Err(Error::Config(format!("l must be >= 1, got {}", self.l)));
        }
        if self.n_components == 0 {
            return Err(Error::Config("n_components must be >= 1".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("cv_folds must be >= 2".into()));
        }
        if self.s_grid.is_empty() || self.l_grid.is_empty() || self.k_grid.is_empty() {
            return Err(Error::Config("candidate grids must be nonempty".into()));
        }
        if self.s_grid.iter().any(|&s| s < F::zero() || s > F::one()) {
            return Err(Error::Config("s grid must lie in [0,1]".into()));
        }
        if self.l_grid.iter().any(|&l| l < F::one()) {
            return Err(Error::Config("l grid must be >= 1".into()));
        }
        if self.k_grid.contains(&0) {
            return Err(Error::Config("component counts must be >= 1".into()));
        }
        if self.max_opt_iter == 0 {
            return Err(Error::Config("max_opt_iter must be >= 1".into()));
        }
        if !(self.opt_tol > F::zero()) {
            return Err(Error::Config("opt_tol must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-component report attached to a high-dimensional fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentReport<F> {
    pub s: F,
    pub l: F,
    pub n_components: usize,
    /// Intercept of the working regression in component space.
    pub alpha: F,
    pub gammas: Vec<F>,
    /// Unit loadings in component space, one per component.
    pub w: Vec<Vec<F>>,
    /// Back-mapped per-variable direction of each component.
    pub variable_loadings: Vec<Vec<F>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HdFitResult<F> {
    pub fit: FitResult<F>,
    pub components: ComponentReport<F>,
    pub warnings: Vec<String>,
}

impl<F: Scalar> HdFitResult<F> {
    /// Linear predictor for new rows: fixed part from the back-mapped
    /// coefficients, time effect at its posterior mean, individual effect at
    /// its prior mean 0. `times` are 0-based; unseen indices also fall back
    /// to the prior mean 0.
    pub fn predict_eta(&self, features: &ArrayView2<F>, times: &[usize]) -> Array1<F> {
        let beta = &self.fit.params.beta;
        let xi2 = self.fit.xi_hat.xi2();
        Array1::from_shape_fn(features.nrows(), |i| {
            let mut eta = beta[0];
            for j in 0..features.ncols() {
                eta += beta[j + 1] * features[(i, j)];
            }
            if times[i] < xi2.len() {
                eta += xi2[times[i]];
            }
            eta
        })
    }

    pub fn predict_mu(
        &self,
        features: &ArrayView2<F>,
        times: &[usize],
        family: &FamilyLink<F>,
    ) -> Array1<F> {
        let eta = self.predict_eta(features, times);
        crate::model::mean_response(&eta.view(), family).mu
    }
}

/// Marginal GLS of z on [1 | f₁ … f_K] under V = U D Uᵀ + Γ: the fixed point
/// of the conditional working-residual regression, reached in one solve (the
/// same identity the ridge flavor uses for β̂_λ).
fn marginal_component_regression<F: Scalar>(
    solver: &MarginalSolver<F>,
    components: &[ExtractedComponent<F>],
    z: &ArrayView1<F>,
) -> Result<(F, Array1<F>, Array1<F>)> {
    let n = z.len();
    let k = components.len();
    let mut design = Array2::<F>::zeros((n, k + 1));
    for i in 0..n {
        design[(i, 0)] = F::one();
    }
    for (h, comp) in components.iter().enumerate() {
        for i in 0..n {
            design[(i, h + 1)] = comp.f[i];
        }
    }
    let vinv_design = solver.v_solve_mat(&design);
    let a = design.t().dot(&vinv_design);
    let rhs = vinv_design.t().dot(z);
    let coef = Cholesky::new(&a, "component regression")?.solve_vec(&rhs.view());
    let alpha = coef[0];
    let gammas = Array1::from_iter(coef.iter().skip(1).copied());
    let fitted = design.dot(&coef);
    Ok((alpha, gammas, fitted))
}

/// High-dimensional fit: the outer loop of the ridge flavor with the β M-step
/// replaced by component extraction. `designs.x()` holds the raw feature block
/// without an intercept column; the fit carries its own unpenalized intercept
/// and reports back-mapped coefficients as `beta = [intercept, per-variable…]`.
pub fn fit_hd<F: Scalar>(
    y: &ArrayView1<F>,
    layout: PanelLayout,
    features: &Array2<F>,
    family: &FamilyLink<F>,
    sc: &ScConfig<F>,
    fit_config: &FitConfig<F>,
) -> Result<HdFitResult<F>> {
    sc.validate()?;
    fit_config.validate()?;
    family.check_response(y)?;
    if y.len() != layout.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "fit_hd: response length",
            expected: layout.n_rows(),
            actual: y.len(),
        });
    }
    if features.nrows() != layout.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "fit_hd: feature rows",
            expected: layout.n_rows(),
            actual: features.nrows(),
        });
    }
    let designs = DesignSet::build(layout, features.clone())?;
    let basis = build_component_basis(&features.view())?;
    let mut warnings: Vec<String> = basis
        .dropped_constant
        .iter()
        .map(|j| format!("constant feature column {j} dropped (zero variance)"))
        .collect();
    if sc.n_components > basis.rank() {
        return Err(Error::Config(format!(
            "n_components = {} exceeds the component basis rank {}",
            sc.n_components,
            basis.rank()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);

    // intercept-only start
    let n = layout.n_rows();
    let mu0 = match family {
        FamilyLink::PoissonLog => {
            let ybar = y.iter().copied().sum::<F>() / F::of_usize(n);
            y.mapv(|v| family.floor_mu((v + ybar) * F::of(0.5)))
        }
        FamilyLink::GaussianIdentity { .. } => y.to_owned(),
    };
    let eta0 = mu0.mapv(|m| family.link(m));
    let wm0 = linearize(y, &eta0.view(), family)?;
    let w_total: F = wm0.gamma_diag.iter().map(|&g| F::one() / g).sum();
    let alpha0 = wm0
        .z
        .iter()
        .zip(wm0.gamma_diag.iter())
        .map(|(&z, &g)| z / g)
        .sum::<F>()
        / w_total;
    let resid0 = wm0.z.mapv(|z| z - alpha0);
    let var0 = crate::simulate::sample_variance(&resid0.view());
    let sigma0 = F::of(0.1) * var0;

    let n_vars = basis.n_original;
    let mut beta_vars = Array1::<F>::zeros(n_vars + 1);
    beta_vars[0] = alpha0;
    let mut params = ModelParams::new(beta_vars, sigma0, sigma0, F::zero())?;
    let mut fixed_part = Array1::<F>::from_elem(n, alpha0);
    let mut xi = RandomEffectState::zeros(layout);
    let mut guard = DivergenceGuard::new();
    let mut prev_w: Vec<Array1<F>> = Vec::new();

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
    let mut report = ComponentReport {
        s: sc.s,
        l: sc.l,
        n_components: sc.n_components,
        alpha: alpha0,
        gammas: Vec::new(),
        w: Vec::new(),
        variable_loadings: Vec::new(),
    };
    let mut no_improvement_seen = false;

    for _outer in 0..fit_config.max_outer_iter {
        let eta = &fixed_part + &designs.u_times(&xi);
        let working = linearize(y, &eta.view(), family)?;
        result.n_eta_clipped += working.n_clipped;
        let deviance = family.deviance(y, &working.mu.view());
        result.deviance_path.push(deviance);
        guard.observe(deviance)?;

        let solver = MarginalSolver::new(layout, &params, &working.gamma_diag.view())?;
        let residual = &working.z - &fixed_part;
        let stats: QPenStats<F> =
            e_step_from_residual(&solver, &designs, &residual.view(), F::zero(), params.rho);

        // variance updates (same closed forms as the ridge flavor)
        let sigma1_sq = (stats.e_xi1_sq / F::of_usize(layout.n_individuals())).max(F::zero());
        let (rho, sigma2_sq) = profile_rho(
            &stats.ar1,
            layout.n_times(),
            fit_config.rho_grid_points,
            fit_config.rho_refine_tol,
            stats.rho_at,
        )?;

        // component extraction against the E-step residual target
        let target = &working.z - &stats.u_mean;
        let gamma_inv = working.gamma_diag.mapv(|g| F::one() / g);
        let mut components: Vec<ExtractedComponent<F>> = Vec::new();
        for h in 0..sc.n_components {
            let mut extracted = None;
            // warm start from the previous iteration's direction
            if let Some(w_prev) = prev_w.get(h) {
                let q = constraint_complement(&basis, &prev_w_slice(&components))?;
                let v0 = q.t().dot(w_prev);
                if let Some((v, val, _)) = projected_ascent(
                    &basis,
                    &q,
                    &v0,
                    &target.view(),
                    &gamma_inv.view(),
                    sc.s,
                    sc.l,
                    sc.max_opt_iter,
                    sc.opt_tol,
                ) {
                    let w = q.dot(&v);
                    let norm = w.dot(&w).sqrt();
                    if norm > F::of(1e-12) {
                        let (w, f) = orient(&basis, w / norm, &target.view(), &gamma_inv.view());
                        extracted = Some(ExtractedComponent {
                            w,
                            f,
                            objective: val,
                            no_improvement: false,
                        });
                    }
                }
            }
            let fresh = extract_component(
                &basis,
                &prev_w_slice(&components),
                &target.view(),
                &gamma_inv.view(),
                sc.s,
                sc.l,
                sc,
                &mut rng,
            )?;
            let chosen = match extracted {
                Some(warm) if warm.objective >= fresh.objective => warm,
                _ => fresh,
            };
            if chosen.no_improvement {
                no_improvement_seen = true;
            }
            components.push(chosen);
            let _ = h;
        }
        let (alpha, gammas, fitted) =
            marginal_component_regression(&solver, &components, &working.z.view())?;

        // back-map to per-variable coefficients
        let mut w_combined = Array1::<F>::zeros(basis.rank());
        for (h, comp) in components.iter().enumerate() {
            w_combined += &(&comp.w * gammas[h]);
        }
        let (coefs, intercept_shift) = basis.to_variable_coefficients(&w_combined.view());
        let mut beta_vars = Array1::<F>::zeros(n_vars + 1);
        beta_vars[0] = alpha + intercept_shift;
        for j in 0..n_vars {
            beta_vars[j + 1] = coefs[j];
        }
        let current = ModelParams::new(beta_vars, sigma1_sq, sigma2_sq, rho)?;

        // ξ at the updated θ, against the updated fixed part
        fixed_part = fitted;
        let solver_new = MarginalSolver::new(layout, &current, &working.gamma_diag.view())?;
        let residual_new = &working.z - &fixed_part;
        xi = mean_as_state(layout, &solver_new.posterior_mean(&residual_new.view()));

        report.alpha = alpha;
        report.gammas = gammas.iter().copied().collect();
        report.w = components.iter().map(|c| c.w.to_vec()).collect();
        report.variable_loadings = components
            .iter()
            .map(|c| basis.to_variable_coefficients(&c.w.view()).0.to_vec())
            .collect();
        prev_w = components.iter().map(|c| c.w.clone()).collect();

        let stable = params_stable(&params, &current, fit_config.tol);
        result.trace.push(current.clone());
        result.n_iter += 1;
        params = current;
        if stable {
            result.converged = true;
            break;
        }
    }
    if no_improvement_seen {
        warnings.push(
            "component ascent found no improvement over its starting points in at least one \
             extraction; the best start was kept"
                .into(),
        );
    }
    result.params = params;
    result.xi_hat = xi;
    Ok(HdFitResult {
        fit: result,
        components: report,
        warnings,
    })
}

fn prev_w_slice<F: Scalar>(components: &[ExtractedComponent<F>]) -> Vec<Array1<F>> {
    components.iter().map(|c| c.w.clone()).collect()
}

/// One cross-validation measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvRecord<F> {
    pub s: F,
    pub l: F,
    pub n_components: usize,
    pub fold: usize,
    /// Out-of-fold predictive deviance (None = the fold fit failed).
    pub deviance: Option<F>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSelection<F> {
    pub s: F,
    pub l: F,
    pub n_components: usize,
    pub table: Vec<CvRecord<F>>,
}

/// Grid search over (K, s, l) scored by out-of-fold predictive deviance with
/// whole individuals held out (fold = individual index mod cv_folds). Held-out
/// rows predict the time effect at its posterior mean from the training fit
/// and the individual effect at its prior mean 0. Ties keep the earlier
/// candidate, so smaller K wins.
pub fn cv_tune<F: Scalar>(
    y: &ArrayView1<F>,
    layout: PanelLayout,
    features: &Array2<F>,
    family: &FamilyLink<F>,
    sc: &ScConfig<F>,
    fit_config: &FitConfig<F>,
) -> Result<CvSelection<F>> {
    sc.validate()?;
    let n_ind = layout.n_individuals();
    let n_time = layout.n_times();
    let folds = sc.cv_folds.min(n_ind);
    let largest_fold = n_ind.div_ceil(folds);
    if n_ind - largest_fold < 2 {
        return Err(Error::Config(format!(
            "cv_folds = {folds} leaves fewer than 2 training individuals"
        )));
    }

    let mut table = Vec::new();
    let mut best: Option<(F, (F, F, usize))> = None;
    for &k in &sc.k_grid {
        for &s in &sc.s_grid {
            for &l in &sc.l_grid {
                let mut total = Some(F::zero());
                let mut fold_records = Vec::with_capacity(folds);
                for fold in 0..folds {
                    let mut train_rows = Vec::new();
                    let mut test_rows = Vec::new();
                    let mut n_train_ind = 0usize;
                    for a in 0..n_ind {
                        let rows = (0..n_time).map(|t| layout.row(a, t));
                        if a % folds == fold {
                            test_rows.extend(rows);
                        } else {
                            n_train_ind += 1;
                            train_rows.extend(rows);
                        }
                    }
                    let train_layout = PanelLayout::new(n_train_ind, n_time)?;
                    let y_train = Array1::from_iter(train_rows.iter().map(|&r| y[r]));
                    let x_train = gather_rows(features, &train_rows);
                    let candidate = ScConfig {
                        s,
                        l,
                        n_components: k,
                        ..sc.clone()
                    };
                    let deviance = fit_hd(
                        &y_train.view(),
                        train_layout,
                        &x_train,
                        family,
                        &candidate,
                        fit_config,
                    )
                    .ok()
                    .map(|hd| {
                        let x_test = gather_rows(features, &test_rows);
                        let times: Vec<usize> =
                            test_rows.iter().map(|&r| layout.time_of(r)).collect();
                        let mu = hd.predict_mu(&x_test.view(), &times, family);
                        let y_test = Array1::from_iter(test_rows.iter().map(|&r| y[r]));
                        family.deviance(&y_test.view(), &mu.view())
                    })
                    .filter(|d| d.is_finite());
                    fold_records.push(CvRecord {
                        s,
                        l,
                        n_components: k,
                        fold,
                        deviance,
                    });
                    total = match (total, deviance) {
                        (Some(t), Some(d)) => Some(t + d),
                        _ => None,
                    };
                }
                table.extend(fold_records);
                if let Some(t) = total {
                    // strict improvement only: earlier (smaller K) wins ties
                    if best.as_ref().is_none_or(|(bt, _)| t < *bt) {
                        best = Some((t, (s, l, k)));
                    }
                }
            }
        }
    }
    match best {
        Some((_, (s, l, k))) => Ok(CvSelection {
            s,
            l,
            n_components: k,
            table,
        }),
        None => Err(Error::MStep(
            "cross-validation failed on every candidate".into(),
        )),
    }
}

fn gather_rows<F: Scalar>(x: &Array2<F>, rows: &[usize]) -> Array2<F> {
    let mut out = Array2::<F>::zeros((rows.len(), x.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&x.row(r));
    }
    out
}
