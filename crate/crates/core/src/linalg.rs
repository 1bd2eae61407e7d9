//! Small dense linear-algebra helpers shared by the sampler and the
//! post-processing steps.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::Rng;
use rand_distr::StandardNormal;

/// Draws from `N(P⁻¹ b, P⁻¹)` given the precision `P`, the canonical mean
/// vector `b` and a vector `z` of standard normals. Returns `None` when `P`
/// is not positive definite.
pub fn gaussian_from_precision(
    precision: DMatrix<f64>,
    b: &DVector<f64>,
    z: &DVector<f64>,
) -> Option<DVector<f64>> {
    if precision.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    let chol = precision.cholesky()?;
    let l = chol.l();
    // P⁻¹ b + L⁻ᵀ z = L⁻ᵀ (L⁻¹ b + z)
    let mut w = l.solve_lower_triangular(b)?;
    w += z;
    l.tr_solve_lower_triangular(&w)
}

/// Matrix of i.i.d. standard normals filled in column-major order.
pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_iterator(rows, cols, (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the signs of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal<R: Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<f64> {
    let g = standard_normal_matrix(m, m, rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order and eigenvectors permuted to match. The input is
/// symmetrized as `(A + Aᵀ)/2` first.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_columns(
        &order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Relative Frobenius reconstruction error accepted by [`checked_svd`].
pub const SVD_RECONSTRUCTION_TOL: f64 = 1e-10;

/// Thin SVD `A = U diag(s) Vᵀ`, returned as `(U, s, Vᵀ)` with `s`
/// decreasing.
///
/// The iterative SVD can converge to an inaccurate factorization of an
/// exactly rank-deficient input, so its reconstruction is checked against
/// [`SVD_RECONSTRUCTION_TOL`]; on a miss the one-sided Jacobi SVD is used
/// instead. `None` only if that also misses.
pub fn checked_svd(a: &DMatrix<f64>) -> Option<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let tol = SVD_RECONSTRUCTION_TOL * a.norm();
    let accurate = |(u, s, v_t): &(DMatrix<f64>, DVector<f64>, DMatrix<f64>)| {
        (u * DMatrix::from_diagonal(s) * v_t - a).norm() <= tol
    };
    SVD::try_new(a.clone(), true, true, f64::EPSILON, 0)
        .and_then(|svd| Some((svd.u?, svd.singular_values, svd.v_t?)))
        .filter(&accurate)
        .or_else(|| Some(jacobi_svd(a)).filter(&accurate))
}

/// One-sided (Hestenes) Jacobi SVD, `(U, s, Vᵀ)` with `s` decreasing.
/// Columns of `U` for zero singular values are an orthonormal completion.
pub fn jacobi_svd(a: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if a.nrows() < a.ncols() {
        let (u, s, v_t) = jacobi_svd(&a.transpose());
        return (v_t.transpose(), s, u.transpose());
    }
    let (m, n) = a.shape();
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dot(&w.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - s * y;
                        mat[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let cutoff = norms.iter().copied().fold(0.0, f64::max) * f64::EPSILON * m.max(n) as f64;
    let s = DVector::from_iterator(n, order.iter().map(|&j| if norms[j] > cutoff { norms[j] } else { 0.0 }));
    let mut u = DMatrix::zeros(m, n);
    let mut filled = 0;
    for (k, &j) in order.iter().enumerate() {
        if s[k] > 0.0 {
            u.set_column(k, &(w.column(j) / norms[j]));
            filled = k + 1;
        }
    }
    // Gram-Schmidt (applied twice) over the unit vectors completes `U`.
    let mut e = 0;
    while filled < n {
        let mut x = DVector::zeros(m);
        x[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for k in 0..filled {
                let proj = u.column(k).dot(&x);
                x -= u.column(k) * proj;
            }
        }
        let len = x.norm();
        if len > 0.5 {
            u.set_column(filled, &(x / len));
            filled += 1;
        }
    }
    let v_sorted = DMatrix::from_columns(&order.iter().map(|&j| v.column(j).into_owned()).collect::<Vec<_>>());
    (u, s, v_sorted.transpose())
}

/// Largest absolute entry of `Q Qᵀ − I`.
pub fn orthogonality_error(q: &DMatrix<f64>) -> f64 {
    let m = q.nrows();
    (q * q.transpose() - DMatrix::<f64>::identity(m, m)).amax()
}
