//! Dense linear-algebra kernels.
//!
//! Everything here is plain Rust generic over [`Scalar`]: desk-scale problems
//! (a few thousand rows, a few hundred random-effect levels) do not warrant a
//! LAPACK backend. The Jacobi routines trade speed for the high relative
//! accuracy needed by the rank decisions in the component basis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky<F> {
    lower: Array2<F>,
}

impl<F: Scalar> Cholesky<F> {
    /// Factors `a = L Lᵀ`. Fails with the offending pivot when `a` is not
    /// numerically positive definite.
    pub fn new(a: &Array2<F>, context: &'static str) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "Cholesky::new",
                expected: n,
                actual: a.ncols(),
            });
        }
        let mut l = Array2::<F>::zeros((n, n));
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if diag <= F::zero() || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context,
                    min_pivot: diag.as_f64(),
                });
            }
            let diag_sqrt = diag.sqrt();
            l[(j, j)] = diag_sqrt;
            for i in (j + 1)..n {
                let mut v = a[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / diag_sqrt;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<F> {
        &self.lower
    }

    /// log det(a) = 2 Σ log L_jj.
    pub fn log_det(&self) -> F {
        let two = F::of(2.0);
        (0..self.dim()).map(|j| self.lower[(j, j)].ln()).sum::<F>() * two
    }

    /// Solves `a x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &ArrayView1<F>) -> Array1<F> {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        let mut x = b.to_owned();
        // forward: L y = b
        for i in 0..n {
            let mut v = x[i];
            for k in 0..i {
                v -= self.lower[(i, k)] * x[k];
            }
            x[i] = v / self.lower[(i, i)];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in (i + 1)..n {
                v -= self.lower[(k, i)] * x[k];
            }
            x[i] = v / self.lower[(i, i)];
        }
        x
    }

    /// Solves `a X = B` column by column.
    pub fn solve_mat(&self, b: &ArrayView2<F>) -> Array2<F> {
        let mut out = Array2::<F>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve_vec(&col));
        }
        out
    }

    /// Dense inverse (used for posterior covariances and traces at q × q scale).
    pub fn inverse(&self) -> Array2<F> {
        let n = self.dim();
        let eye = Array2::<F>::eye(n);
        self.solve_mat(&eye.view())
    }

    /// trace(a⁻¹) without materializing the full inverse: Σ ‖L⁻¹ e_j‖².
    pub fn inverse_trace(&self) -> F {
        let n = self.dim();
        let mut total = F::zero();
        // Solve L y = e_j by forward substitution; tr(a⁻¹) = Σ_j ‖y_j‖².
        let mut y = vec![F::zero(); n];
        for j in 0..n {
            for v in y.iter_mut() {
                *v = F::zero();
            }
            y[j] = F::one() / self.lower[(j, j)];
            for i in (j + 1)..n {
                let mut v = F::zero();
                for k in j..i {
                    v -= self.lower[(i, k)] * y[k];
                }
                y[i] = v / self.lower[(i, i)];
            }
            for v in y.iter().skip(j) {
                total += *v * *v;
            }
        }
        total
    }
}

/// Solves a symmetric positive-definite system in one call.
pub fn solve_spd<F: Scalar>(
    a: &Array2<F>,
    b: &ArrayView1<F>,
    context: &'static str,
) -> Result<Array1<F>> {
    Ok(Cholesky::new(a, context)?.solve_vec(b))
}

/// Eigen decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// eigenvectors in the matching columns.
pub fn sym_eigen<F: Scalar>(a: &Array2<F>) -> (Array1<F>, Array2<F>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen wants a square matrix");
    let mut m = a.clone();
    let mut vecs = Array2::<F>::eye(n);
    let tol = F::epsilon() * F::of(n as f64);
    for _sweep in 0..100 {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        let scale: F = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= tol * tol * (scale + off) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == F::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (F::of(2.0) * apq);
                let t = if tau >= F::zero() {
                    F::one() / (tau + (F::one() + tau * tau).sqrt())
                } else {
                    -F::one() / (-tau + (F::one() + tau * tau).sqrt())
                };
                let c = F::one() / (F::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = vecs[(k, p)];
                    let vkq = vecs[(k, q)];
                    vecs[(k, p)] = c * vkp - s * vkq;
                    vecs[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(i, i)]
            .partial_cmp(&m[(j, j)])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = Array1::from_iter(order.iter().map(|&i| m[(i, i)]));
    let mut sorted_vecs = Array2::<F>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        sorted_vecs.column_mut(dst).assign(&vecs.column(src));
    }
    (vals, sorted_vecs)
}

/// Eigenvalues only, ascending.
pub fn sym_eigenvalues<F: Scalar>(a: &Array2<F>) -> Array1<F> {
    sym_eigen(a).0
}

/// Thin singular value decomposition `a = u diag(s) vᵀ`.
#[derive(Debug, Clone)]
pub struct ThinSvd<F> {
    /// n × k left singular vectors (columns with positive singular value).
    pub u: Array2<F>,
    /// Singular values, descending, all strictly positive.
    pub singular_values: Array1<F>,
    /// p × k right singular vectors.
    pub v: Array2<F>,
}

/// One-sided Jacobi SVD, keeping only singular values above
/// `rel_tol * max(singular values)`.
///
/// The one-sided scheme computes small singular values to high relative
/// accuracy, which is what makes the rank threshold meaningful.
pub fn thin_svd<F: Scalar>(a: &ArrayView2<F>, rel_tol: F) -> ThinSvd<F> {
    let (n, p) = a.dim();
    if p > n {
        // Orthogonalizing the shorter column set is cheaper; swap the roles.
        let t = thin_svd(&a.t(), rel_tol);
        return ThinSvd {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
        };
    }
    let mut work = a.to_owned();
    let mut v = Array2::<F>::eye(p);
    let jacobi_tol = F::epsilon() * F::of(8.0);
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let mut aii = F::zero();
                let mut ajj = F::zero();
                let mut aij = F::zero();
                for k in 0..n {
                    let x = work[(k, i)];
                    let y = work[(k, j)];
                    aii += x * x;
                    ajj += y * y;
                    aij += x * y;
                }
                if aii == F::zero() || ajj == F::zero() {
                    continue;
                }
                if aij.abs() <= jacobi_tol * (aii * ajj).sqrt() {
                    continue;
                }
                rotated = true;
                let tau = (ajj - aii) / (F::of(2.0) * aij);
                let t = if tau >= F::zero() {
                    F::one() / (tau + (F::one() + tau * tau).sqrt())
                } else {
                    -F::one() / (-tau + (F::one() + tau * tau).sqrt())
                };
                let c = F::one() / (F::one() + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let x = work[(k, i)];
                    let y = work[(k, j)];
                    work[(k, i)] = c * x - s * y;
                    work[(k, j)] = s * x + c * y;
                }
                for k in 0..p {
                    let x = v[(k, i)];
                    let y = v[(k, j)];
                    v[(k, i)] = c * x - s * y;
                    v[(k, j)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut norms: Vec<(usize, F)> = (0..p)
        .map(|j| {
            let nrm = work.column(j).iter().map(|&x| x * x).sum::<F>().sqrt();
            (j, nrm)
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let max_sv = norms.first().map(|&(_, s)| s).unwrap_or(F::zero());
    let cutoff = rel_tol * max_sv;
    let kept: Vec<(usize, F)> = norms
        .into_iter()
        .filter(|&(_, s)| s > cutoff && s > F::zero())
        .collect();
    let k = kept.len();
    let mut u = Array2::<F>::zeros((n, k));
    let mut vout = Array2::<F>::zeros((p, k));
    let mut svals = Array1::<F>::zeros(k);
    for (dst, &(src, s)) in kept.iter().enumerate() {
        svals[dst] = s;
        let inv = F::one() / s;
        for r in 0..n {
            u[(r, dst)] = work[(r, src)] * inv;
        }
        vout.column_mut(dst).assign(&v.column(src));
        // Deterministic sign: largest-magnitude entry of each right vector positive.
        let mut best = 0usize;
        for r in 1..p {
            if vout[(r, dst)].abs() > vout[(best, dst)].abs() {
                best = r;
            }
        }
        if vout[(best, dst)] < F::zero() {
            for r in 0..p {
                vout[(r, dst)] = -vout[(r, dst)];
            }
            for r in 0..n {
                u[(r, dst)] = -u[(r, dst)];
            }
        }
    }
    ThinSvd {
        u,
        singular_values: svals,
        v: vout,
    }
}
