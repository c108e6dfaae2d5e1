//! Exact Gaussian computations on the linearized mixed model
//! `z = Xβ + Uξ + e`, `e ~ N(0, Γ)`, `ξ ~ N(0, D)`.
//!
//! The workhorse is [`MarginalSolver`], which factors the marginal covariance
//! `V = U D Uᵀ + Γ` through `B = U K` with `K Kᵀ = D` (K block diagonal:
//! `σ₁ I_N` and the closed-form AR(1) Cholesky factor). The Woodbury identity
//! then reduces every V⁻¹ application to one (N+T)×(N+T) Cholesky solve:
//!
//! ```text
//! M = I + Bᵀ Γ⁻¹ B                  (always SPD, even for σ² = 0)
//! V⁻¹ x   = Γ⁻¹x − Γ⁻¹ B M⁻¹ Bᵀ Γ⁻¹ x
//! E[ξ|z]  = K M⁻¹ Bᵀ Γ⁻¹ (z − Xβ)
//! Cov[ξ|z] = K M⁻¹ Kᵀ
//! log det V = log det M + Σ log Γ_ii
//! tr(U D Uᵀ V⁻¹) = (N+T) − tr(M⁻¹)
//! ```
//!
//! Degenerate variance components need no special casing: a zero block in K
//! zeroes the matching rows of B, giving posterior mean 0 and covariance 0 for
//! that block structurally.

use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, Cholesky};
use crate::model::{ar1_cholesky_factor, DesignSet, ModelParams, PanelLayout, RandomEffectState};
use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, ArrayView1};

/// Conditional (posterior) moments of ξ given the working response.
#[derive(Debug, Clone)]
pub struct PosteriorMoments<F> {
    /// E[ξ | z], length N + T.
    pub mean: Array1<F>,
    /// Cov[ξ | z].
    pub cov: Array2<F>,
    /// E[ξ ξᵀ | z] = cov + mean meanᵀ.
    pub second_moment: Array2<F>,
}

impl<F: Scalar> PosteriorMoments<F> {
    fn from_mean_cov(mean: Array1<F>, cov: Array2<F>) -> Self {
        let q = mean.len();
        let mut second_moment = cov.clone();
        for i in 0..q {
            for j in 0..q {
                second_moment[(i, j)] += mean[i] * mean[j];
            }
        }
        Self {
            mean,
            cov,
            second_moment,
        }
    }
}

/// Woodbury-form solver for `V = U D Uᵀ + Γ` at fixed variance parameters.
#[derive(Debug, Clone)]
pub struct MarginalSolver<F> {
    layout: PanelLayout,
    gamma_inv: Array1<F>,
    sigma1: F,
    /// Closed-form Cholesky factor of the AR(1) block (zero when σ₂² = 0).
    l2: Array2<F>,
    m_chol: Cholesky<F>,
    sum_log_gamma: F,
}

impl<F: Scalar> MarginalSolver<F> {
    pub fn new(
        layout: PanelLayout,
        params: &ModelParams<F>,
        gamma_diag: &ArrayView1<F>,
    ) -> Result<Self> {
        params.validate()?;
        let n = layout.n_rows();
        if gamma_diag.len() != n {
            return Err(Error::DimensionMismatch {
                context: "MarginalSolver: gamma_diag length",
                expected: n,
                actual: gamma_diag.len(),
            });
        }
        if gamma_diag.iter().any(|&g| !(g > F::zero()) || !g.is_finite()) {
            return Err(Error::InvalidParameter(
                "gamma_diag must be strictly positive and finite".into(),
            ));
        }
        let n_ind = layout.n_individuals();
        let n_time = layout.n_times();
        let sigma1 = params.sigma1_sq.sqrt();
        let l2 = ar1_cholesky_factor(n_time, params.rho, params.sigma2_sq)?;
        let gamma_inv = gamma_diag.mapv(|g| F::one() / g);
        let sum_log_gamma = gamma_diag.iter().map(|&g| g.ln()).sum();

        // M = I + Bᵀ Γ⁻¹ B assembled from the incidence structure:
        //   Uᵀ Γ⁻¹ U = [[diag(r₁), W], [Wᵀ, diag(r₂)]]
        // with r₁ per-individual weight sums, r₂ per-time sums, W the N×T
        // weight table, and B = U K.
        let weights = gamma_inv
            .view()
            .into_shape_with_order((n_ind, n_time))
            .expect("row-major panel reshape");
        let r1 = weights.sum_axis(ndarray::Axis(1));
        let r2 = weights.sum_axis(ndarray::Axis(0));
        let q = n_ind + n_time;
        let mut m = Array2::<F>::eye(q);
        let s1_sq = params.sigma1_sq;
        for a in 0..n_ind {
            m[(a, a)] += s1_sq * r1[a];
        }
        let w_l2 = weights.dot(&l2);
        for a in 0..n_ind {
            for j in 0..n_time {
                let v = sigma1 * w_l2[(a, j)];
                m[(a, n_ind + j)] = v;
                m[(n_ind + j, a)] = v;
            }
        }
        let mut r2_l2 = l2.clone();
        for t in 0..n_time {
            for j in 0..n_time {
                r2_l2[(t, j)] *= r2[t];
            }
        }
        let bottom = l2.t().dot(&r2_l2);
        for i in 0..n_time {
            for j in 0..n_time {
                m[(n_ind + i, n_ind + j)] += bottom[(i, j)];
            }
        }
        let m_chol = Cholesky::new(&m, "posterior scale matrix")?;
        Ok(Self {
            layout,
            gamma_inv,
            sigma1,
            l2,
            m_chol,
            sum_log_gamma,
        })
    }

    pub fn layout(&self) -> PanelLayout {
        self.layout
    }

    pub fn gamma_inv(&self) -> &Array1<F> {
        &self.gamma_inv
    }

    /// `Bᵀ Γ⁻¹ v` via per-individual / per-time sums.
    fn bt_gamma_inv_times(&self, v: &ArrayView1<F>) -> Array1<F> {
        let n_ind = self.layout.n_individuals();
        let n_time = self.layout.n_times();
        let mut by_ind = Array1::<F>::zeros(n_ind);
        let mut by_time = Array1::<F>::zeros(n_time);
        for row in 0..self.layout.n_rows() {
            let w = v[row] * self.gamma_inv[row];
            by_ind[self.layout.individual_of(row)] += w;
            by_time[self.layout.time_of(row)] += w;
        }
        let mut out = Array1::<F>::zeros(n_ind + n_time);
        for a in 0..n_ind {
            out[a] = self.sigma1 * by_ind[a];
        }
        let tail = self.l2.t().dot(&by_time);
        out.slice_mut(s![n_ind..]).assign(&tail);
        out
    }

    /// `B h = U K h`.
    fn b_times(&self, h: &ArrayView1<F>) -> Array1<F> {
        let n_ind = self.layout.n_individuals();
        let top = h.slice(s![..n_ind]).mapv(|v| v * self.sigma1);
        let bottom = self.l2.dot(&h.slice(s![n_ind..]));
        let mut out = Array1::<F>::zeros(self.layout.n_rows());
        for row in 0..self.layout.n_rows() {
            out[row] = top[self.layout.individual_of(row)] + bottom[self.layout.time_of(row)];
        }
        out
    }

    /// `K h` (q-vector).
    fn k_times(&self, h: &ArrayView1<F>) -> Array1<F> {
        let n_ind = self.layout.n_individuals();
        let mut out = Array1::<F>::zeros(h.len());
        for a in 0..n_ind {
            out[a] = self.sigma1 * h[a];
        }
        let bottom = self.l2.dot(&h.slice(s![n_ind..]));
        out.slice_mut(s![n_ind..]).assign(&bottom);
        out
    }

    /// `K A Kᵀ` for a q×q matrix.
    fn k_conjugate(&self, a: &Array2<F>) -> Array2<F> {
        let n_ind = self.layout.n_individuals();
        let q = a.nrows();
        // left-multiply by K
        let mut left = a.clone();
        for i in 0..n_ind {
            for j in 0..q {
                left[(i, j)] *= self.sigma1;
            }
        }
        let bottom = self.l2.dot(&a.slice(s![n_ind.., ..]));
        left.slice_mut(s![n_ind.., ..]).assign(&bottom);
        // right-multiply by Kᵀ
        let mut out = left.clone();
        for i in 0..q {
            for j in 0..n_ind {
                out[(i, j)] *= self.sigma1;
            }
        }
        let right = left.slice(s![.., n_ind..]).dot(&self.l2.t());
        out.slice_mut(s![.., n_ind..]).assign(&right);
        out
    }

    /// V x (used by tests and the dense hat-matrix path).
    pub fn v_times(&self, x: &ArrayView1<F>) -> Array1<F> {
        let n_ind = self.layout.n_individuals();
        let n_time = self.layout.n_times();
        // Bᵀ x without the Γ⁻¹ weighting
        let mut by_ind = Array1::<F>::zeros(n_ind);
        let mut by_time = Array1::<F>::zeros(n_time);
        for row in 0..self.layout.n_rows() {
            by_ind[self.layout.individual_of(row)] += x[row];
            by_time[self.layout.time_of(row)] += x[row];
        }
        let mut bt_x = Array1::<F>::zeros(n_ind + n_time);
        for a in 0..n_ind {
            bt_x[a] = self.sigma1 * by_ind[a];
        }
        let tail = self.l2.t().dot(&by_time);
        bt_x.slice_mut(s![n_ind..]).assign(&tail);
        let mut out = self.b_times(&bt_x.view());
        for row in 0..self.layout.n_rows() {
            out[row] += x[row] / self.gamma_inv[row];
        }
        out
    }

    /// V⁻¹ x.
    pub fn v_solve_vec(&self, x: &ArrayView1<F>) -> Array1<F> {
        let c = self.bt_gamma_inv_times(x);
        let h = self.m_chol.solve_vec(&c.view());
        let correction = self.b_times(&h.view());
        Array1::from_shape_fn(x.len(), |i| {
            self.gamma_inv[i] * (x[i] - correction[i])
        })
    }

    /// V⁻¹ X column by column.
    pub fn v_solve_mat(&self, x: &Array2<F>) -> Array2<F> {
        let mut out = Array2::<F>::zeros(x.raw_dim());
        for (j, col) in x.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.v_solve_vec(&col));
        }
        out
    }

    /// log det V via the determinant lemma.
    pub fn log_det_v(&self) -> F {
        self.m_chol.log_det() + self.sum_log_gamma
    }

    /// tr(U D Uᵀ V⁻¹) = q − tr(M⁻¹): the λ-independent random-effect part of
    /// the hat-matrix trace.
    pub fn trace_udu_vinv(&self) -> F {
        F::of_usize(self.layout.n_random()) - self.m_chol.inverse_trace()
    }

    /// Posterior mean of ξ given the fixed-effect residual `r = z − Xβ`.
    pub fn posterior_mean(&self, residual: &ArrayView1<F>) -> Array1<F> {
        let c = self.bt_gamma_inv_times(residual);
        let h = self.m_chol.solve_vec(&c.view());
        self.k_times(&h.view())
    }

    /// Full posterior moments of ξ given the fixed-effect residual.
    pub fn posterior(&self, residual: &ArrayView1<F>) -> PosteriorMoments<F> {
        let mean = self.posterior_mean(residual);
        let cov = self.k_conjugate(&self.m_chol.inverse());
        PosteriorMoments::from_mean_cov(mean, cov)
    }

    /// tr(Uᵀ Γ⁻¹ U · C) for a q×q matrix C, using the incidence structure.
    pub fn trace_ugu(&self, c: &Array2<F>) -> F {
        let n_ind = self.layout.n_individuals();
        let n_time = self.layout.n_times();
        let weights = self
            .gamma_inv
            .view()
            .into_shape_with_order((n_ind, n_time))
            .expect("row-major panel reshape");
        let mut total = F::zero();
        for a in 0..n_ind {
            let r1a: F = weights.row(a).iter().copied().sum();
            total += r1a * c[(a, a)];
        }
        for t in 0..n_time {
            let r2t: F = weights.column(t).iter().copied().sum();
            total += r2t * c[(n_ind + t, n_ind + t)];
        }
        let two = F::of(2.0);
        for a in 0..n_ind {
            for t in 0..n_time {
                total += two * weights[(a, t)] * c[(a, n_ind + t)];
            }
        }
        total
    }
}

/// Dense marginal covariance `V = U D Uᵀ + Γ`, assembled from the panel
/// structure entry by entry and verified positive definite.
pub fn marginal_covariance<F: Scalar>(
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    gamma_diag: &ArrayView1<F>,
) -> Result<Array2<F>> {
    params.validate()?;
    let layout = designs.layout();
    let n = layout.n_rows();
    if gamma_diag.len() != n {
        return Err(Error::DimensionMismatch {
            context: "marginal_covariance: gamma_diag length",
            expected: n,
            actual: gamma_diag.len(),
        });
    }
    let sigma2 = crate::model::ar1_covariance(layout.n_times(), params.rho, params.sigma2_sq)?;
    let mut v = Array2::<F>::zeros((n, n));
    for i in 0..n {
        let (ai, ti) = (layout.individual_of(i), layout.time_of(i));
        for j in 0..n {
            let (aj, tj) = (layout.individual_of(j), layout.time_of(j));
            let mut val = sigma2[(ti, tj)];
            if ai == aj {
                val += params.sigma1_sq;
            }
            if i == j {
                val += gamma_diag[i];
            }
            v[(i, j)] = val;
        }
    }
    if Cholesky::new(&v, "marginal covariance").is_err() {
        let min_eig = sym_eigenvalues(&v)[0];
        return Err(Error::NotPositiveDefinite {
            context: "marginal covariance",
            min_pivot: min_eig.as_f64(),
        });
    }
    Ok(v)
}

/// Shared per-iteration state for the GLS/ridge computations: the solver plus
/// the λ-independent cross products.
pub struct GlsContext<'d, F> {
    designs: &'d DesignSet<F>,
    solver: MarginalSolver<F>,
    /// V⁻¹ X (n × p).
    vinv_x: Array2<F>,
    /// Xᵀ V⁻¹ X (p × p).
    xt_vinv_x: Array2<F>,
    /// Xᵀ V⁻¹ Γ V⁻¹ X: the λ-sensitive part of the hat-matrix trace.
    g2: Array2<F>,
    trace_random: F,
}

impl<'d, F: Scalar> GlsContext<'d, F> {
    pub fn new(
        designs: &'d DesignSet<F>,
        params: &ModelParams<F>,
        gamma_diag: &ArrayView1<F>,
    ) -> Result<Self> {
        let solver = MarginalSolver::new(designs.layout(), params, gamma_diag)?;
        let vinv_x = solver.v_solve_mat(designs.x());
        let xt_vinv_x = designs.x().t().dot(&vinv_x);
        let mut gamma_vinv_x = vinv_x.clone();
        for (i, mut row) in gamma_vinv_x.rows_mut().into_iter().enumerate() {
            let g = F::one() / solver.gamma_inv()[i];
            row.mapv_inplace(|v| v * g);
        }
        let g2 = vinv_x.t().dot(&gamma_vinv_x);
        let trace_random = solver.trace_udu_vinv();
        Ok(Self {
            designs,
            solver,
            vinv_x,
            xt_vinv_x,
            g2,
            trace_random,
        })
    }

    pub fn solver(&self) -> &MarginalSolver<F> {
        &self.solver
    }

    pub fn designs(&self) -> &DesignSet<F> {
        self.designs
    }

    /// Xᵀ V⁻¹ z.
    pub fn xt_vinv(&self, z: &ArrayView1<F>) -> Array1<F> {
        self.vinv_x.t().dot(z)
    }

    fn penalized_normal_matrix(&self, lambda: F, penalty_mask: &ArrayView1<F>) -> Result<Cholesky<F>> {
        let p = self.designs.n_fixed();
        if penalty_mask.len() != p {
            return Err(Error::DimensionMismatch {
                context: "penalty mask length",
                expected: p,
                actual: penalty_mask.len(),
            });
        }
        let mut a = self.xt_vinv_x.clone();
        for j in 0..p {
            a[(j, j)] += lambda * penalty_mask[j];
        }
        Cholesky::new(&a, "ridge normal matrix").map_err(|e| match e {
            Error::NotPositiveDefinite { min_pivot, .. } => Error::Singular(format!(
                "XᵀV⁻¹X + λP is singular (pivot {min_pivot:e}); \
                 the design may be collinear — try λ > 0"
            )),
            other => other,
        })
    }

    /// Penalized GLS estimate β̂_λ = (XᵀV⁻¹X + λP)⁻¹ XᵀV⁻¹ z.
    pub fn ridge_beta(
        &self,
        z: &ArrayView1<F>,
        lambda: F,
        penalty_mask: &ArrayView1<F>,
    ) -> Result<Array1<F>> {
        let chol = self.penalized_normal_matrix(lambda, penalty_mask)?;
        Ok(chol.solve_vec(&self.xt_vinv(z).view()))
    }

    /// Hat matrix S_λ: the linear map z ↦ ẑ = Xβ̂_λ + U ξ̂(β̂_λ), carried as an
    /// operator with its exact trace; `to_dense` materializes it at test scale.
    pub fn hat_matrix(&self, lambda: F, penalty_mask: &ArrayView1<F>) -> Result<HatMatrix<'_, 'd, F>> {
        let chol = self.penalized_normal_matrix(lambda, penalty_mask)?;
        // tr(A_λ⁻¹ G₂)
        let solved = chol.solve_mat(&self.g2.view());
        let trace_fixed = (0..solved.nrows()).map(|i| solved[(i, i)]).sum();
        Ok(HatMatrix {
            ctx: self,
            a_chol: chol,
            trace_fixed,
        })
    }
}

/// The fitted-value operator ẑ = S_λ z at one penalty value.
pub struct HatMatrix<'c, 'd, F> {
    ctx: &'c GlsContext<'d, F>,
    a_chol: Cholesky<F>,
    trace_fixed: F,
}

impl<F: Scalar> HatMatrix<'_, '_, F> {
    /// ẑ = S_λ z, computed as z − Γ V⁻¹ (z − X β̂_λ).
    pub fn apply(&self, z: &ArrayView1<F>) -> Array1<F> {
        let (zhat, _) = self.apply_with_beta(z);
        zhat
    }

    /// Fitted values together with the ridge-GLS coefficient vector.
    pub fn apply_with_beta(&self, z: &ArrayView1<F>) -> (Array1<F>, Array1<F>) {
        let beta = self.a_chol.solve_vec(&self.ctx.xt_vinv(z).view());
        let vinv_z = self.ctx.solver.v_solve_vec(z);
        let vinv_resid = &vinv_z - &self.ctx.vinv_x.dot(&beta);
        let zhat = Array1::from_shape_fn(z.len(), |i| {
            z[i] - vinv_resid[i] / self.ctx.solver.gamma_inv()[i]
        });
        (zhat, beta)
    }

    /// Exact trace, split as fixed-effect part + random-effect part.
    pub fn trace(&self) -> F {
        self.trace_fixed + self.ctx.trace_random
    }

    pub fn trace_fixed_part(&self) -> F {
        self.trace_fixed
    }

    pub fn trace_random_part(&self) -> F {
        self.ctx.trace_random
    }

    /// Dense n × n materialization (test scale only: n applications).
    pub fn to_dense(&self) -> Array2<F> {
        let n = self.ctx.designs.layout().n_rows();
        let mut dense = Array2::<F>::zeros((n, n));
        let mut e = Array1::<F>::zeros(n);
        for j in 0..n {
            e[j] = F::one();
            dense.column_mut(j).assign(&self.apply(&e.view()));
            e[j] = F::zero();
        }
        dense
    }
}

/// Posterior moments of ξ given z at fixed parameters: the spec-level wrapper
/// around [`MarginalSolver::posterior`].
pub fn posterior_xi<F: Scalar>(
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    gamma_diag: &ArrayView1<F>,
    z: &ArrayView1<F>,
    beta: &ArrayView1<F>,
) -> Result<PosteriorMoments<F>> {
    if beta.len() != designs.n_fixed() {
        return Err(Error::DimensionMismatch {
            context: "posterior_xi: beta length",
            expected: designs.n_fixed(),
            actual: beta.len(),
        });
    }
    let solver = MarginalSolver::new(designs.layout(), params, gamma_diag)?;
    let residual = z - &designs.x().dot(beta);
    Ok(solver.posterior(&residual.view()))
}

/// Penalized GLS fixed effects: spec-level wrapper building its own solver.
pub fn ridge_gls_beta<F: Scalar>(
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    gamma_diag: &ArrayView1<F>,
    z: &ArrayView1<F>,
    lambda: F,
    penalty_mask: &ArrayView1<F>,
) -> Result<Array1<F>> {
    if lambda < F::zero() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be >= 0, got {lambda}"
        )));
    }
    let ctx = GlsContext::new(designs, params, gamma_diag)?;
    ctx.ridge_beta(z, lambda, penalty_mask)
}

/// Penalized marginal log-likelihood of the linearized model,
/// `log N(z; Xβ, U D Uᵀ + Γ) − (λ/2) βᵀ P β`.
pub fn penalized_marginal_loglik<F: Scalar>(
    designs: &DesignSet<F>,
    params: &ModelParams<F>,
    gamma_diag: &ArrayView1<F>,
    z: &ArrayView1<F>,
    lambda: F,
    penalty_mask: &ArrayView1<F>,
) -> Result<F> {
    let solver = MarginalSolver::new(designs.layout(), params, gamma_diag)?;
    let residual = z - &designs.x().dot(&params.beta);
    let vinv_r = solver.v_solve_vec(&residual.view());
    let quad = residual.dot(&vinv_r);
    let n = F::of_usize(designs.layout().n_rows());
    let ln_2pi = F::of(std::f64::consts::TAU).ln();
    let half = F::of(0.5);
    let penalty: F = params
        .beta
        .iter()
        .zip(penalty_mask.iter())
        .map(|(&b, &m)| m * b * b)
        .sum();
    Ok(-half * (n * ln_2pi + solver.log_det_v() + quad) - half * lambda * penalty)
}

/// Splits a stacked posterior mean back into (ξ₁, ξ₂).
pub fn mean_as_state<F: Scalar>(layout: PanelLayout, mean: &Array1<F>) -> RandomEffectState<F> {
    RandomEffectState::from_stacked(layout, &mean.view()).expect("posterior mean has length N+T")
}
