//! Weighted data spaces.
//!
//! A Hermitian positive-definite weighting `W` on the vectorized CSM space
//! defines the inner product `<a, b>_W = <a, W⁻¹ b>_2`. Weightings are kept in
//! structured form; dense expansion exists for small problems and tests.

use nalgebra::{Cholesky, DVector, Dyn};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::covariance::CovarianceEstimate;
use crate::error::{Error, Result};
use crate::linalg::{
    ensure_hermitian, hermitian_eigen, inner, min_eigenvalue, submatrix, subvector, unvectorize,
    vec_index, vec_pair, vectorize, CMat, CVec,
};

const HERMITIAN_TOL: f64 = 1e-10;

/// Retained entries of the vectorized `M x M` data after removing sensor pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMask {
    mics: usize,
    retained: Vec<usize>,
    label: String,
}

impl SelectionMask {
    pub fn none(mics: usize) -> Self {
        SelectionMask {
            mics,
            retained: (0..mics * mics).collect(),
            label: "none".into(),
        }
    }

    /// Drops the auto-spectra `(m, m)`.
    pub fn diagonal_removal(mics: usize) -> Self {
        let retained = (0..mics * mics)
            .filter(|&j| {
                let (m, l) = vec_pair(j, mics);
                m != l
            })
            .collect();
        SelectionMask {
            mics,
            retained,
            label: "diagonal-removal".into(),
        }
    }

    pub fn from_removed_pairs(mics: usize, removed: &[(usize, usize)]) -> Result<Self> {
        let mut keep = vec![true; mics * mics];
        for &(m, l) in removed {
            if m >= mics || l >= mics {
                return Err(Error::InvalidArgument(format!(
                    "sensor pair ({m}, {l}) out of range for {mics} microphones"
                )));
            }
            keep[vec_index(m, l, mics)] = false;
        }
        let retained: Vec<usize> = (0..mics * mics).filter(|&j| keep[j]).collect();
        if retained.is_empty() {
            return Err(Error::InvalidArgument("mask removes every entry".into()));
        }
        Ok(SelectionMask {
            mics,
            retained,
            label: format!("custom({} removed)", mics * mics - keep.iter().filter(|&&k| k).count()),
        })
    }

    pub fn mics(&self) -> usize {
        self.mics
    }

    /// Dimension of the unreduced space, `M²`.
    pub fn full_dim(&self) -> usize {
        self.mics * self.mics
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn is_identity(&self) -> bool {
        self.retained.len() == self.full_dim()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn reduce_vec(&self, v: &CVec) -> Result<CVec> {
        if v.len() != self.full_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.full_dim(),
                got: v.len(),
            });
        }
        Ok(subvector(v, &self.retained))
    }

    /// `vec(A)` restricted to the retained entries.
    pub fn reduce_matrix(&self, a: &CMat) -> Result<CVec> {
        self.reduce_vec(&vectorize(a))
    }

    /// Reduced `vec(g gᴴ)` computed entrywise.
    pub fn reduce_rank_one(&self, g: &CVec) -> Result<CVec> {
        if g.len() != self.mics {
            return Err(Error::DimensionMismatch {
                expected: self.mics,
                got: g.len(),
            });
        }
        Ok(CVec::from_iterator(
            self.retained.len(),
            self.retained.iter().map(|&j| {
                let (m, l) = vec_pair(j, self.mics);
                g[m] * g[l].conj()
            }),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct DenseWeight {
    matrix: CMat,
    factor: Cholesky<Complex64, Dyn>,
}

impl DenseWeight {
    pub fn new(matrix: CMat) -> Result<Self> {
        ensure_hermitian(&matrix, "weighting matrix", HERMITIAN_TOL)?;
        let factor = cholesky(&matrix, "weighting matrix")?;
        Ok(DenseWeight { matrix, factor })
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }
}

/// `W = Rᵀ ⊗ R` for Hermitian positive-definite `R`.
#[derive(Debug, Clone)]
pub struct KroneckerWeight {
    r: CMat,
    factor: Cholesky<Complex64, Dyn>,
}

impl KroneckerWeight {
    pub fn new(r: CMat) -> Result<Self> {
        ensure_hermitian(&r, "Kronecker factor", HERMITIAN_TOL)?;
        let factor = cholesky(&r, "Kronecker factor")?;
        Ok(KroneckerWeight { r, factor })
    }

    pub fn factor(&self) -> &CMat {
        &self.r
    }

    /// `vec(R⁻¹ A R⁻¹)` for `v = vec(A)`.
    fn apply_inverse(&self, v: &CVec) -> Result<CVec> {
        let a = unvectorize(v, self.r.nrows())?;
        let left = self.factor.solve(&a);
        // (R⁻¹ A) R⁻¹ = (R⁻¹ (R⁻¹ A)ᴴ)ᴴ since R is Hermitian.
        let both = self.factor.solve(&left.adjoint()).adjoint();
        Ok(vectorize(&both))
    }
}

/// `W = D + Lᴴ L` with positive diagonal `D` and `L` of size `L x n`.
#[derive(Debug, Clone)]
pub struct LowRankWeight {
    diag: DVector<f64>,
    factor: CMat,
    capacitance: Cholesky<Complex64, Dyn>,
}

impl LowRankWeight {
    pub fn new(diag: DVector<f64>, factor: CMat) -> Result<Self> {
        check_positive_diagonal(&diag)?;
        if factor.ncols() != diag.len() {
            return Err(Error::DimensionMismatch {
                expected: diag.len(),
                got: factor.ncols(),
            });
        }
        let capacitance = capacitance_factor(&diag, &factor)?;
        Ok(LowRankWeight {
            diag,
            factor,
            capacitance,
        })
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn factor(&self) -> &CMat {
        &self.factor
    }

    pub fn rank(&self) -> usize {
        self.factor.nrows()
    }
}

#[derive(Debug, Clone)]
pub enum WeightingScheme {
    ScaledIdentity { dim: usize, sigma2: f64 },
    Diagonal(DVector<f64>),
    DenseHermitian(DenseWeight),
    KroneckerPair(KroneckerWeight),
    /// Microphone shading `ν`, representing `W = diag(vec(ν νᵀ))⁻¹`.
    Shading { nu: DVector<f64>, diag: DVector<f64> },
    DiagPlusLowRank(LowRankWeight),
}

impl WeightingScheme {
    pub fn scaled_identity(dim: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "scaled identity needs sigma² > 0 and dim > 0, got {sigma2}, {dim}"
            )));
        }
        Ok(WeightingScheme::ScaledIdentity { dim, sigma2 })
    }

    pub fn diagonal(d: DVector<f64>) -> Result<Self> {
        check_positive_diagonal(&d)?;
        Ok(WeightingScheme::Diagonal(d))
    }

    pub fn dense(w: CMat) -> Result<Self> {
        Ok(WeightingScheme::DenseHermitian(DenseWeight::new(w)?))
    }

    pub fn kronecker(r: CMat) -> Result<Self> {
        Ok(WeightingScheme::KroneckerPair(KroneckerWeight::new(r)?))
    }

    pub fn shading(nu: DVector<f64>) -> Result<Self> {
        if nu.is_empty() || nu.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "shading weights must be positive and finite".into(),
            ));
        }
        let m = nu.len();
        let diag = DVector::from_fn(m * m, |j, _| {
            let (a, b) = vec_pair(j, m);
            1.0 / (nu[a] * nu[b])
        });
        Ok(WeightingScheme::Shading { nu, diag })
    }

    pub fn low_rank(diag: DVector<f64>, factor: CMat) -> Result<Self> {
        Ok(WeightingScheme::DiagPlusLowRank(LowRankWeight::new(diag, factor)?))
    }

    /// Diagonal-plus-low-rank surrogate of a dense Hermitian matrix: `D` is its
    /// diagonal, `L` holds the leading positive eigenpairs of the off-diagonal
    /// remainder, enough of them to capture `mass_fraction` of its squared
    /// Frobenius norm (or all positive ones if that is not reachable).
    pub fn low_rank_from_dense(sigma: &CMat, mass_fraction: f64) -> Result<Self> {
        ensure_hermitian(sigma, "covariance", HERMITIAN_TOL)?;
        let n = sigma.nrows();
        let diag = DVector::from_fn(n, |i, _| sigma[(i, i)].re);
        let mut remainder = sigma.clone();
        for i in 0..n {
            remainder[(i, i)] = Complex64::new(0.0, 0.0);
        }
        let total: f64 = remainder.iter().map(|z| z.norm_sqr()).sum();
        let (values, vectors) = hermitian_eigen(&remainder);
        let mut rows: Vec<CVec> = Vec::new();
        let mut captured = 0.0;
        for k in (0..n).rev() {
            let lambda = values[k];
            if lambda <= 0.0 || (total > 0.0 && captured >= mass_fraction * total) {
                break;
            }
            captured += lambda * lambda;
            let scale = lambda.sqrt();
            rows.push(vectors.column(k).map(|z| z.conj() * scale));
        }
        let factor = CMat::from_fn(rows.len(), n, |r, c| rows[r][c]);
        WeightingScheme::low_rank(diag, factor)
    }

    pub fn dim(&self) -> usize {
        match self {
            WeightingScheme::ScaledIdentity { dim, .. } => *dim,
            WeightingScheme::Diagonal(d) => d.len(),
            WeightingScheme::DenseHermitian(w) => w.matrix.nrows(),
            WeightingScheme::KroneckerPair(k) => k.r.nrows() * k.r.nrows(),
            WeightingScheme::Shading { diag, .. } => diag.len(),
            WeightingScheme::DiagPlusLowRank(w) => w.diag.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            WeightingScheme::ScaledIdentity { .. } => "scaled-identity",
            WeightingScheme::Diagonal(_) => "diagonal",
            WeightingScheme::DenseHermitian(_) => "dense",
            WeightingScheme::KroneckerPair(_) => "kronecker",
            WeightingScheme::Shading { .. } => "shading",
            WeightingScheme::DiagPlusLowRank(_) => "diag-plus-low-rank",
        }
    }

    /// Short descriptor used to check that maps and systems share a weighting.
    pub fn descriptor(&self) -> String {
        format!("{}(dim={})", self.kind(), self.dim())
    }

    fn check_dim(&self, v: &CVec) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `W⁻¹ v`.
    pub fn apply_inverse(&self, v: &CVec) -> Result<CVec> {
        self.check_dim(v)?;
        match self {
            WeightingScheme::ScaledIdentity { sigma2, .. } => Ok(v.unscale(*sigma2)),
            WeightingScheme::Diagonal(d) | WeightingScheme::Shading { diag: d, .. } => {
                Ok(v.zip_map(d, |x, di| x / di))
            }
            WeightingScheme::DenseHermitian(w) => Ok(w.factor.solve(v)),
            WeightingScheme::KroneckerPair(k) => k.apply_inverse(v),
            WeightingScheme::DiagPlusLowRank(w) => {
                Ok(woodbury_with(&w.diag, &w.factor, &w.capacitance, v))
            }
        }
    }

    /// `W⁻¹` applied to every column of `cols`.
    pub fn apply_inverse_columns(&self, cols: &CMat) -> Result<CMat> {
        if cols.nrows() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: cols.nrows(),
            });
        }
        if let WeightingScheme::DenseHermitian(w) = self {
            return Ok(w.factor.solve(cols));
        }
        let solved = (0..cols.ncols())
            .into_par_iter()
            .map(|c| self.apply_inverse(&cols.column(c).into_owned()))
            .collect::<Result<Vec<_>>>()?;
        Ok(CMat::from_columns(&solved))
    }

    /// `W v`.
    pub fn apply(&self, v: &CVec) -> Result<CVec> {
        self.check_dim(v)?;
        match self {
            WeightingScheme::ScaledIdentity { sigma2, .. } => Ok(v.scale(*sigma2)),
            WeightingScheme::Diagonal(d) | WeightingScheme::Shading { diag: d, .. } => {
                Ok(v.zip_map(d, |x, di| x * di))
            }
            WeightingScheme::DenseHermitian(w) => Ok(&w.matrix * v),
            WeightingScheme::KroneckerPair(k) => {
                let a = unvectorize(v, k.r.nrows())?;
                Ok(vectorize(&(&k.r * a * &k.r)))
            }
            WeightingScheme::DiagPlusLowRank(w) => {
                let low = w.factor.adjoint() * (&w.factor * v);
                Ok(v.zip_map(&w.diag, |x, di| x * di) + low)
            }
        }
    }

    /// Dense `W`; intended for small dimensions.
    pub fn to_dense(&self) -> CMat {
        let n = self.dim();
        match self {
            WeightingScheme::DenseHermitian(w) => w.matrix.clone(),
            WeightingScheme::KroneckerPair(k) => k.r.transpose().kronecker(&k.r),
            _ => {
                let mut out = CMat::zeros(n, n);
                for c in 0..n {
                    let mut e = CVec::zeros(n);
                    e[c] = Complex64::new(1.0, 0.0);
                    out.set_column(c, &self.apply(&e).expect("dimension checked"));
                }
                out
            }
        }
    }

    /// Restricts the represented `W` to the mask's retained rows and columns.
    pub fn reduce(&self, mask: &SelectionMask) -> Result<WeightingScheme> {
        if mask.full_dim() != self.dim() {
            return Err(Error::InconsistentInputs(format!(
                "mask acts on {} entries, weighting has dimension {}",
                mask.full_dim(),
                self.dim()
            )));
        }
        if mask.is_empty() {
            return Err(Error::InvalidArgument("mask retains no entries".into()));
        }
        let keep = mask.retained();
        if mask.is_identity() {
            return Ok(self.clone());
        }
        match self {
            WeightingScheme::ScaledIdentity { sigma2, .. } => Ok(WeightingScheme::ScaledIdentity {
                dim: keep.len(),
                sigma2: *sigma2,
            }),
            WeightingScheme::Diagonal(d) | WeightingScheme::Shading { diag: d, .. } => Ok(
                WeightingScheme::Diagonal(DVector::from_iterator(keep.len(), keep.iter().map(|&j| d[j]))),
            ),
            WeightingScheme::DenseHermitian(w) => WeightingScheme::dense(submatrix(&w.matrix, keep)),
            WeightingScheme::KroneckerPair(k) => {
                let m = k.r.nrows();
                let r = &k.r;
                let reduced = CMat::from_fn(keep.len(), keep.len(), |a, b| {
                    let (ma, la) = vec_pair(keep[a], m);
                    let (mb, lb) = vec_pair(keep[b], m);
                    // (Rᵀ ⊗ R)[(l,m),(l',m')] = R[l',l] R[m,m'].
                    r[(lb, la)] * r[(ma, mb)]
                });
                WeightingScheme::dense(reduced)
            }
            WeightingScheme::DiagPlusLowRank(w) => {
                let diag = DVector::from_iterator(keep.len(), keep.iter().map(|&j| w.diag[j]));
                let factor = CMat::from_fn(w.factor.nrows(), keep.len(), |r, c| w.factor[(r, keep[c])]);
                WeightingScheme::low_rank(diag, factor)
            }
        }
    }
}

/// Inputs for the named weighting choices.
#[derive(Debug, Clone, Copy)]
pub enum WeightingChoice<'a> {
    /// `W = σ² I` on the `mics²`-dimensional data space.
    Conventional { mics: usize, sigma2: f64 },
    /// Inverse variances: `W = diag(Σ)`.
    InverseVarianceDiagonal(&'a CovarianceEstimate),
    /// Full inverse covariance (Mahalanobis): `W = Σ`.
    InverseVarianceFull(&'a CovarianceEstimate),
    /// Diagonal-plus-low-rank surrogate of `Σ`.
    InverseVarianceLowRank(&'a CovarianceEstimate, f64),
    Shading(&'a DVector<f64>),
    /// Robust adaptive beamforming: `W = Rᵀ ⊗ R`, `R = C + αI`.
    RobustAdaptive { csm: &'a CMat, alpha: f64 },
    /// Capon: `W = Cᵀ ⊗ C`.
    Capon { csm: &'a CMat },
}

pub fn build_weighting(choice: WeightingChoice<'_>) -> Result<WeightingScheme> {
    match choice {
        WeightingChoice::Conventional { mics, sigma2 } => WeightingScheme::scaled_identity(mics * mics, sigma2),
        WeightingChoice::InverseVarianceDiagonal(cov) => {
            let n = cov.dim();
            let d = DVector::from_fn(n, |i, _| cov.sigma[(i, i)].re);
            if let Some((i, &v)) = d.iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
                return Err(Error::NotPositiveDefinite {
                    what: format!("variance of data entry {i}"),
                    eigenvalue: v,
                });
            }
            WeightingScheme::diagonal(d)
        }
        WeightingChoice::InverseVarianceFull(cov) => WeightingScheme::dense(cov.sigma.clone()),
        WeightingChoice::InverseVarianceLowRank(cov, fraction) => {
            WeightingScheme::low_rank_from_dense(&cov.sigma, fraction)
        }
        WeightingChoice::Shading(nu) => WeightingScheme::shading(nu.clone()),
        WeightingChoice::RobustAdaptive { csm, alpha } => {
            if !(alpha > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "robust adaptive loading must be positive, got {alpha}"
                )));
            }
            let n = csm.nrows();
            WeightingScheme::kronecker(csm + CMat::identity(n, n).scale(alpha))
        }
        WeightingChoice::Capon { csm } => WeightingScheme::kronecker(csm.clone()),
    }
}

/// `<a, b>_W = <a, W⁻¹ b>_2`.
pub fn weighted_inner(w: &WeightingScheme, a: &CVec, b: &CVec) -> Result<Complex64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            got: a.len(),
        });
    }
    Ok(inner(a, &w.apply_inverse(b)?))
}

/// `(D + Lᴴ L)⁻¹ v` through the Sherman-Morrison-Woodbury identity; only the
/// `L x L` capacitance matrix `I + L D⁻¹ Lᴴ` is factorized.
pub fn woodbury_apply(diag: &DVector<f64>, factor: &CMat, v: &CVec) -> Result<CVec> {
    check_positive_diagonal(diag)?;
    if factor.ncols() != diag.len() || v.len() != diag.len() {
        return Err(Error::DimensionMismatch {
            expected: diag.len(),
            got: if factor.ncols() != diag.len() { factor.ncols() } else { v.len() },
        });
    }
    let cap = capacitance_factor(diag, factor)?;
    Ok(woodbury_with(diag, factor, &cap, v))
}

fn woodbury_with(diag: &DVector<f64>, factor: &CMat, cap: &Cholesky<Complex64, Dyn>, v: &CVec) -> CVec {
    let dinv_v = v.zip_map(diag, |x, d| x / d);
    if factor.nrows() == 0 {
        return dinv_v;
    }
    let t = cap.solve(&(factor * &dinv_v));
    let correction = (factor.adjoint() * t).zip_map(diag, |x, d| x / d);
    dinv_v - correction
}

fn capacitance_factor(diag: &DVector<f64>, factor: &CMat) -> Result<Cholesky<Complex64, Dyn>> {
    let rank = factor.nrows();
    let scaled = CMat::from_fn(factor.nrows(), factor.ncols(), |r, c| factor[(r, c)] / diag[c]);
    let cap = CMat::identity(rank, rank) + scaled * factor.adjoint();
    // I + L D⁻¹ Lᴴ is Hermitian with eigenvalues ≥ 1 whenever D > 0.
    crate::linalg::hpd_cholesky(&crate::linalg::hermitian_part(&cap)).ok_or_else(|| Error::NotPositiveDefinite {
        what: "Woodbury capacitance matrix".into(),
        eigenvalue: min_eigenvalue(&cap),
    })
}

fn check_positive_diagonal(d: &DVector<f64>) -> Result<()> {
    if d.is_empty() {
        return Err(Error::InvalidArgument("empty diagonal".into()));
    }
    if let Some((i, &v)) = d.iter().enumerate().find(|(_, &v)| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NotPositiveDefinite {
            what: format!("diagonal weight {i}"),
            eigenvalue: v,
        });
    }
    Ok(())
}

fn cholesky(matrix: &CMat, what: &str) -> Result<Cholesky<Complex64, Dyn>> {
    if !crate::linalg::all_finite(matrix) {
        return Err(Error::NonFinite(what.into()));
    }
    crate::linalg::hpd_cholesky(matrix).ok_or_else(|| Error::NotPositiveDefinite {
        what: what.into(),
        eigenvalue: min_eigenvalue(matrix),
    })
}
