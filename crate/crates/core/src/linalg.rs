//! Thin helpers over nalgebra for the handful of dense operations the
//! oracle and inference modules share: the centering projector
//! `J_n = I - (1/n)11ᵀ` (always applied matrix-free), symmetric
//! pseudo-inverses, and spectral norms of symmetric matrices.

use nalgebra::{DMatrix, DVector};

/// `J_n v`: subtract the mean from every entry.
pub fn center_vector(v: &DVector<f64>) -> DVector<f64> {
    let m = v.mean();
    v.map(|x| x - m)
}

/// `J_n M`: subtract each column's mean from that column.
pub fn center_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mu = col.mean();
        col.add_scalar_mut(-mu);
    }
    out
}

/// Pseudo-inverse of a symmetric matrix through its eigendecomposition:
/// eigenvalues with `|λ| <= threshold` are zeroed rather than inverted.
pub fn sym_pinv(a: &DMatrix<f64>, threshold: f64) -> DMatrix<f64> {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let inv_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| if l.abs() <= threshold { 0.0 } else { 1.0 / l })
        .collect();
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&DVector::from_vec(inv_vals));
    q * d * q.transpose()
}

/// `(A + Aᵀ)/2`, for killing floating-point asymmetry before an
/// eigendecomposition or Cholesky factorization.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (a + a.transpose())
}

/// Largest-magnitude eigenvalue of a symmetric matrix.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(a).symmetric_eigen();
    eig.eigenvalues.iter().fold(0.0_f64, |m, &l| m.max(l.abs()))
}

/// Eigenvalue range `(min, max)` of a symmetric matrix.
pub fn eig_range_sym(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = symmetrize(a).symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in eig.eigenvalues.iter() {
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo, hi)
}

/// Number of eigenvalues within `tol` of 1.
pub fn count_unit_eigenvalues(a: &DMatrix<f64>, tol: f64) -> usize {
    let eig = symmetrize(a).symmetric_eigen();
    eig.eigenvalues.iter().filter(|l| (**l - 1.0).abs() <= tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_kills_constants() {
        let v = DVector::from_element(5, 3.25);
        assert!(center_vector(&v).amax() < 1e-15);
    }

    #[test]
    fn pinv_of_singular_symmetric() {
        // Rank-1 projector onto 1: pinv equals itself.
        let n = 4;
        let p = DMatrix::from_element(n, n, 1.0 / n as f64);
        let pinv = sym_pinv(&p, 1e-10);
        assert!((pinv.clone() - &p).amax() < 1e-12);
        // A x = b is solved on the range: pinv * p = p.
        assert!((pinv * &p - &p).amax() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diag() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, -0.9, 0.5]));
        assert!((spectral_norm_sym(&d) - 0.9).abs() < 1e-14);
    }
}
