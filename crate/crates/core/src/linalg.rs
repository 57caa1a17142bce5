//! Shared dense linear-algebra helpers.
//!
//! Vectorization is column-major throughout the crate: the entry `(m, l)` of
//! an `M x M` matrix lives at flat index `l * M + m` of its vectorization.
//! Every conversion between matrix entries and flat indices goes through
//! [`vec_index`] and [`vec_pair`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Flat column-major index of entry `(m, l)` in a `dim x dim` matrix.
#[inline]
pub fn vec_index(m: usize, l: usize, dim: usize) -> usize {
    l * dim + m
}

/// Inverse of [`vec_index`].
#[inline]
pub fn vec_pair(j: usize, dim: usize) -> (usize, usize) {
    (j % dim, j / dim)
}

pub fn vectorize(a: &CMat) -> CVec {
    // nalgebra stores dense matrices column-major already.
    CVec::from_column_slice(a.as_slice())
}

pub fn unvectorize(v: &CVec, dim: usize) -> Result<CMat> {
    if v.len() != dim * dim {
        return Err(Error::DimensionMismatch {
            expected: dim * dim,
            got: v.len(),
        });
    }
    Ok(CMat::from_column_slice(dim, dim, v.as_slice()))
}

/// `vec(g g^*)` without forming the matrix.
pub fn rank_one_vec(g: &CVec) -> CVec {
    let dim = g.len();
    CVec::from_fn(dim * dim, |j, _| {
        let (m, l) = vec_pair(j, dim);
        g[m] * g[l].conj()
    })
}

/// Euclidean inner product `<a, b>_2 = sum_j a_j conj(b_j)`.
pub fn inner(a: &CVec, b: &CVec) -> Complex64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y.conj()).sum()
}

/// Largest entrywise deviation from Hermitian symmetry, relative to the
/// largest entry magnitude.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let n = a.nrows();
    let mut scale = 0.0f64;
    let mut defect = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            scale = scale.max(a[(i, j)].norm());
            defect = defect.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        defect / scale
    }
}

pub fn ensure_square(a: &CMat, what: &str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{what} must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

pub fn ensure_hermitian(a: &CMat, what: &str, tol: f64) -> Result<usize> {
    let n = ensure_square(a, what)?;
    let defect = hermitian_defect(a);
    if defect > tol {
        return Err(Error::InvalidArgument(format!(
            "{what} is not Hermitian (relative defect {defect:e})"
        )));
    }
    Ok(n)
}

/// `(A + A^*) / 2`.
pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()).scale(0.5)
}

/// Eigendecomposition of the Hermitian part of `a`, eigenvalues ascending.
pub fn hermitian_eigen(a: &CMat) -> (DVector<f64>, CMat) {
    let eig = SymmetricEigen::new(hermitian_part(a));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = DVector::from_fn(n, |k, _| eig.eigenvalues[order[k]]);
    let vectors = CMat::from_fn(n, n, |r, k| eig.eigenvectors[(r, order[k])]);
    (values, vectors)
}

pub fn min_eigenvalue(a: &CMat) -> f64 {
    let (values, _) = hermitian_eigen(a);
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Cholesky factor of a Hermitian positive-definite matrix, or `None` when a
/// pivot is not strictly positive.
pub fn hpd_cholesky(a: &CMat) -> Option<Cholesky<Complex64, Dyn>> {
    let chol = Cholesky::new(a.clone())?;
    let l = chol.l_dirty();
    let ok = (0..l.nrows()).all(|i| {
        let d = l[(i, i)];
        d.re > 0.0 && d.re.is_finite() && d.im.abs() <= 1e-12 * d.re
    });
    ok.then_some(chol)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// Rows and columns of `a` restricted to `keep` (in the given order).
pub fn submatrix(a: &CMat, keep: &[usize]) -> CMat {
    CMat::from_fn(keep.len(), keep.len(), |i, j| a[(keep[i], keep[j])])
}

pub fn subvector(v: &CVec, keep: &[usize]) -> CVec {
    CVec::from_iterator(keep.len(), keep.iter().map(|&j| v[j]))
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn all_finite(a: &CMat) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_cholesky_rejects_indefinite() {
        let mut a = CMat::identity(2, 2);
        assert!(hpd_cholesky(&a).is_some());
        a[(1, 1)] = Complex64::new(-0.5, 0.0);
        assert!(hpd_cholesky(&a).is_none());
        a[(1, 1)] = Complex64::new(0.0, 0.0);
        assert!(hpd_cholesky(&a).is_none());
    }

    #[test]
    fn vec_index_roundtrip_and_layout() {
        let a = CMat::from_fn(3, 3, |i, j| Complex64::new(i as f64, j as f64));
        let v = vectorize(&a);
        for m in 0..3 {
            for l in 0..3 {
                let j = vec_index(m, l, 3);
                assert_eq!(vec_pair(j, 3), (m, l));
                assert_eq!(v[j], a[(m, l)]);
            }
        }
        assert_eq!(unvectorize(&v, 3).unwrap(), a);
    }

    #[test]
    fn rank_one_vec_matches_outer_product() {
        let g = CVec::from_vec(vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.25)]);
        let outer = &g * g.adjoint();
        assert_eq!(rank_one_vec(&g), vectorize(&outer));
    }

    #[test]
    fn eigen_is_sorted_and_reconstructs() {
        let a = CMat::from_row_slice(
            2,
            2,
            &[
                Complex64::new(2.0, 0.0),
                Complex64::new(0.0, 1.0),
                Complex64::new(0.0, -1.0),
                Complex64::new(2.0, 0.0),
            ],
        );
        let (values, vectors) = hermitian_eigen(&a);
        assert!((values[0] - 1.0).abs() < 1e-12 && (values[1] - 3.0).abs() < 1e-12);
        let diag = CMat::from_diagonal(&values.map(|x| Complex64::new(x, 0.0)));
        let back = &vectors * diag * vectors.adjoint();
        assert!(frobenius(&(back - a)) < 1e-12);
    }
}
