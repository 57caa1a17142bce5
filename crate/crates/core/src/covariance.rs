//! Covariance of the vectorized CSM, `Σ = Cov(vec C^obs)`.
//!
//! Both estimators first produce the per-block covariance `Σ̃ = Cov(vec p pᴴ)`;
//! [`CovarianceEstimate`] stores the covariance of the block-averaged CSM,
//! `Σ = Σ̃ / J`, and derives `Σ̃` on demand.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{
    ensure_hermitian, ensure_square, hermitian_eigen, hermitian_part, submatrix, vec_index,
    vec_pair, CMat, CVec,
};
use crate::spectra::BlockSamples;
use crate::weighting::SelectionMask;

/// Largest microphone count for which a dense `M² x M²` covariance is built.
pub const MAX_DENSE_MICS: usize = 64;

const HERMITIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceMethod {
    GaussianFormula,
    Sample,
}

impl CovarianceMethod {
    pub fn tag(self) -> u8 {
        match self {
            CovarianceMethod::GaussianFormula => 0,
            CovarianceMethod::Sample => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(CovarianceMethod::GaussianFormula),
            1 => Some(CovarianceMethod::Sample),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CovarianceMethod::GaussianFormula => "gaussian",
            CovarianceMethod::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepairInfo {
    pub alpha: f64,
    pub clipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    /// Covariance of the averaged CSM.
    pub sigma: CMat,
    pub method: CovarianceMethod,
    pub block_count: usize,
    pub repair: Option<RepairInfo>,
    /// Upper bound on the rank (`J` for sample covariances).
    pub rank_bound: Option<usize>,
}

impl CovarianceEstimate {
    pub fn from_per_block(per_block: CMat, method: CovarianceMethod, block_count: usize) -> Result<Self> {
        if block_count == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        ensure_square(&per_block, "covariance")?;
        Ok(CovarianceEstimate {
            sigma: per_block.unscale(block_count as f64),
            method,
            block_count,
            repair: None,
            rank_bound: None,
        })
    }

    /// Gaussian-formula estimate for a CSM averaged over `block_count` blocks.
    pub fn gaussian(csm: &CMat, pcsm: &CMat, block_count: usize) -> Result<Self> {
        let per_block = gaussian_covariance_estimate(csm, pcsm)?;
        CovarianceEstimate::from_per_block(per_block, CovarianceMethod::GaussianFormula, block_count)
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }

    /// `Σ̃ = J Σ`, the covariance of a single block's outer product.
    pub fn per_block(&self) -> CMat {
        self.sigma.scale(self.block_count as f64)
    }

    /// Same estimate for a different averaging length.
    pub fn with_block_count(&self, block_count: usize) -> Result<Self> {
        if block_count == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let mut out = self.clone();
        out.sigma = self.sigma.scale(self.block_count as f64 / block_count as f64);
        out.block_count = block_count;
        Ok(out)
    }

    /// Rows and columns restricted to the mask's retained entries.
    pub fn reduce(&self, mask: &SelectionMask) -> Result<Self> {
        if mask.full_dim() != self.dim() {
            return Err(Error::InconsistentInputs(format!(
                "mask acts on {} entries, covariance has {}",
                mask.full_dim(),
                self.dim()
            )));
        }
        let mut out = self.clone();
        out.sigma = submatrix(&self.sigma, mask.retained());
        Ok(out)
    }

    /// Nearest-PSD repair with eigenvalue floor `alpha`.
    pub fn repaired(&self, alpha: f64) -> Result<Self> {
        let (sigma, clipped) = nearest_psd_regularized(&self.sigma, alpha)?;
        Ok(CovarianceEstimate {
            sigma,
            repair: Some(RepairInfo { alpha, clipped }),
            ..self.clone()
        })
    }

    pub fn diagnostics(&self) -> SpectralDiagnostics {
        spectral_diagnostics(&self.sigma)
    }

    /// Number of eigenvalues above `rel_tol · λ_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let (values, _) = hermitian_eigen(&self.sigma);
        let top = values.iter().copied().fold(0.0f64, f64::max);
        values.iter().filter(|&&v| v > rel_tol * top).count()
    }
}

/// Per-block covariance from the fourth-moment (Isserlis) formula for zero-mean
/// complex Gaussian data:
/// `Cov(C_ml, C_m'l') = C_mm' conj(C_ll') + P_ml' conj(P_lm')`,
/// laid out in column-major vectorization.
pub fn gaussian_covariance_estimate(csm: &CMat, pcsm: &CMat) -> Result<CMat> {
    let m = ensure_square(csm, "CSM")?;
    if pcsm.shape() != csm.shape() {
        return Err(Error::InvalidArgument(format!(
            "CSM is {m}x{m} but PCSM is {}x{}",
            pcsm.nrows(),
            pcsm.ncols()
        )));
    }
    if m > MAX_DENSE_MICS {
        return Err(Error::InvalidArgument(format!(
            "dense covariance limited to {MAX_DENSE_MICS} microphones, got {m}"
        )));
    }
    let n = m * m;
    let columns: Vec<Vec<Complex64>> = (0..n)
        .into_par_iter()
        .map(|jp| {
            let (mp, lp) = vec_pair(jp, m);
            (0..n)
                .map(|j| {
                    let (mi, li) = vec_pair(j, m);
                    csm[(mi, mp)] * csm[(li, lp)].conj() + pcsm[(mi, lp)] * pcsm[(li, mp)].conj()
                })
                .collect()
        })
        .collect();
    Ok(CMat::from_iterator(n, n, columns.into_iter().flatten()))
}

/// `‖Σ̃‖_F²` and `tr Σ̃` of the Gaussian-formula estimate without storing it.
pub fn gaussian_covariance_norms(csm: &CMat, pcsm: &CMat) -> Result<(f64, Complex64)> {
    let m = ensure_square(csm, "CSM")?;
    if pcsm.shape() != csm.shape() {
        return Err(Error::InvalidArgument("CSM and PCSM shapes differ".into()));
    }
    let n = m * m;
    let frob2: f64 = (0..n)
        .into_par_iter()
        .map(|jp| {
            let (mp, lp) = vec_pair(jp, m);
            (0..n)
                .map(|j| {
                    let (mi, li) = vec_pair(j, m);
                    (csm[(mi, mp)] * csm[(li, lp)].conj() + pcsm[(mi, lp)] * pcsm[(li, mp)].conj())
                        .norm_sqr()
                })
                .sum::<f64>()
        })
        .sum();
    let mut trace = Complex64::new(0.0, 0.0);
    for l in 0..m {
        for mi in 0..m {
            trace += csm[(mi, mi)] * csm[(l, l)].conj() + pcsm[(mi, l)] * pcsm[(l, mi)].conj();
        }
    }
    Ok((frob2, trace))
}

/// Sample covariance of the single-block outer products at frequency `freq`.
pub fn sample_covariance(blocks: &BlockSamples, freq: usize) -> Result<CovarianceEstimate> {
    let j = blocks.n_blocks();
    if j < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: j });
    }
    let m = blocks.n_mics();
    if m > MAX_DENSE_MICS {
        return Err(Error::InvalidArgument(format!(
            "dense covariance limited to {MAX_DENSE_MICS} microphones, got {m}"
        )));
    }
    let n = m * m;
    let mut samples = CMat::zeros(n, j);
    for b in 0..j {
        let p = blocks.block_vector(b, freq);
        for l in 0..m {
            for mi in 0..m {
                samples[(vec_index(mi, l, m), b)] = p[mi] * p[l].conj();
            }
        }
    }
    let mean: CVec = samples.column_mean();
    for mut col in samples.column_iter_mut() {
        col -= &mean;
    }
    let per_block = (&samples * samples.adjoint()).unscale(j as f64);
    let mut est = CovarianceEstimate::from_per_block(per_block, CovarianceMethod::Sample, j)?;
    est.rank_bound = Some(j.min(n));
    Ok(est)
}

/// Frobenius-nearest Hermitian matrix with all eigenvalues `≥ alpha`:
/// `U diag(max(λ_i, α)) Uᴴ`. Returns the matrix and the number of clipped
/// eigenvalues.
pub fn nearest_psd_regularized(sigma: &CMat, alpha: f64) -> Result<(CMat, usize)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eigenvalue floor must be positive, got {alpha}"
        )));
    }
    ensure_hermitian(sigma, "covariance", HERMITIAN_TOL)?;
    let (values, vectors) = hermitian_eigen(sigma);
    let clipped = values.iter().filter(|&&v| v < alpha).count();
    if clipped == 0 {
        return Ok((hermitian_part(sigma), 0));
    }
    let floored = values.map(|v| Complex64::new(v.max(alpha), 0.0));
    let scaled = DMatrix::from_fn(vectors.nrows(), vectors.ncols(), |r, c| vectors[(r, c)] * floored[c]);
    let out = hermitian_part(&(scaled * vectors.adjoint()));
    Ok((out, clipped))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralDiagnostics {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `λ_max / λ_min`; infinite when `λ_min ≤ 0`.
    pub condition_number: f64,
}

pub fn spectral_diagnostics(sigma: &CMat) -> SpectralDiagnostics {
    let (values, _) = hermitian_eigen(sigma);
    let lambda_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let condition_number = if lambda_min > 0.0 {
        lambda_max / lambda_min
    } else {
        f64::INFINITY
    };
    SpectralDiagnostics {
        lambda_min,
        lambda_max,
        condition_number,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, kron, min_eigenvalue};
    use crate::spectra::{csm_at, pcsm_at};
    use crate::synth::standard_complex_normal_vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scalar(x: f64) -> CMat {
        CMat::from_element(1, 1, c(x, 0.0))
    }

    fn random_psd(rng: &mut ChaCha8Rng, m: usize) -> CMat {
        let vs: Vec<CVec> = (0..m + 2).map(|_| standard_complex_normal_vec(rng, m)).collect();
        let mut a = CMat::zeros(m, m);
        for v in &vs {
            a += v * v.adjoint();
        }
        a
    }

    #[test]
    fn scalar_examples() {
        assert_eq!(gaussian_covariance_estimate(&scalar(2.0), &scalar(0.0)).unwrap(), scalar(4.0));
        assert_eq!(gaussian_covariance_estimate(&scalar(2.0), &scalar(1.0)).unwrap(), scalar(5.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(gaussian_covariance_estimate(&CMat::zeros(2, 2), &CMat::zeros(3, 3)).is_err());
    }

    #[test]
    fn proper_formula_is_the_kronecker_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let csm = random_psd(&mut rng, 3);
            let est = gaussian_covariance_estimate(&csm, &CMat::zeros(3, 3)).unwrap();
            let k = kron(&csm.transpose(), &csm);
            assert!(frobenius(&(&est - &k)) <= 1e-12 * frobenius(&k));
        }
    }

    #[test]
    fn gaussian_estimate_is_hermitian_with_pseudo_part() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks: Vec<CVec> = (0..5).map(|_| standard_complex_normal_vec(&mut rng, 3)).collect();
        let b = BlockSamples::from_frequency_blocks(vec![1.0], &[blocks]).unwrap();
        let est = gaussian_covariance_estimate(&csm_at(&b, 0), &pcsm_at(&b, 0)).unwrap();
        assert!(frobenius(&(&est - est.adjoint())) < 1e-12 * frobenius(&est));
    }

    #[test]
    fn streaming_norms_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blocks: Vec<CVec> = (0..4).map(|_| standard_complex_normal_vec(&mut rng, 3)).collect();
        let b = BlockSamples::from_frequency_blocks(vec![1.0], &[blocks]).unwrap();
        let (csm, pcsm) = (csm_at(&b, 0), pcsm_at(&b, 0));
        let dense = gaussian_covariance_estimate(&csm, &pcsm).unwrap();
        let (f2, tr) = gaussian_covariance_norms(&csm, &pcsm).unwrap();
        assert_relative_eq!(f2, frobenius(&dense).powi(2), max_relative = 1e-12);
        assert!((tr - dense.trace()).norm() < 1e-12 * tr.norm());
    }

    #[test]
    fn identical_blocks_have_zero_sample_covariance() {
        let p = CVec::from_vec(vec![c(1.0, 2.0), c(-0.5, 0.1)]);
        let b = BlockSamples::from_frequency_blocks(vec![1.0], &[vec![p.clone(), p.clone(), p]]).unwrap();
        let est = sample_covariance(&b, 0).unwrap();
        assert!(est.sigma.camax() < 1e-15);
    }

    #[test]
    fn two_point_sample_variance() {
        let b = BlockSamples::from_frequency_blocks(
            vec![1.0],
            &[vec![CVec::from_element(1, c(1.0, 1.0)), CVec::from_element(1, c(0.0, 3.0))]],
        )
        .unwrap();
        let est = sample_covariance(&b, 0).unwrap();
        // |p|² = 2 and 9: population variance of two points is ((9-2)/2)².
        assert_relative_eq!(est.per_block()[(0, 0)].re, 12.25, epsilon = 1e-12);
        assert_relative_eq!(est.sigma[(0, 0)].re, 12.25 / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn sample_covariance_needs_two_blocks() {
        let b = BlockSamples::from_frequency_blocks(vec![1.0], &[vec![CVec::from_element(2, c(1.0, 0.0))]]).unwrap();
        assert!(matches!(
            sample_covariance(&b, 0),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn sample_rank_is_bounded_by_block_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let blocks: Vec<CVec> = (0..32).map(|_| standard_complex_normal_vec(&mut rng, 8)).collect();
        let b = BlockSamples::from_frequency_blocks(vec![1.0], &[blocks]).unwrap();
        let est = sample_covariance(&b, 0).unwrap();
        assert_eq!(est.rank_bound, Some(32));
        assert!(est.numerical_rank(1e-10) <= 32);
    }

    #[test]
    fn sample_covariance_ignores_block_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut blocks: Vec<CVec> = (0..6).map(|_| standard_complex_normal_vec(&mut rng, 2)).collect();
        let a = sample_covariance(&BlockSamples::from_frequency_blocks(vec![1.0], &[blocks.clone()]).unwrap(), 0).unwrap();
        blocks.reverse();
        blocks.swap(1, 4);
        let b = sample_covariance(&BlockSamples::from_frequency_blocks(vec![1.0], &[blocks]).unwrap(), 0).unwrap();
        assert!(frobenius(&(a.sigma - b.sigma)) < 1e-14);
    }

    #[test]
    fn clipping_examples() {
        let id = CMat::identity(3, 3).scale(2.0);
        let (out, clipped) = nearest_psd_regularized(&id, 1.0).unwrap();
        assert_eq!(clipped, 0);
        assert!(frobenius(&(out - &id)) < 1e-15);

        let (out, clipped) = nearest_psd_regularized(&CMat::zeros(2, 2), 1.0).unwrap();
        assert_eq!(clipped, 2);
        assert!(frobenius(&(out - CMat::identity(2, 2))) < 1e-14);

        assert!(nearest_psd_regularized(&id, 0.0).is_err());
        let mut skew = CMat::identity(2, 2);
        skew[(0, 1)] = c(1.0, 0.0);
        assert!(nearest_psd_regularized(&skew, 0.5).is_err());
    }

    /// Projected gradient on `min ‖X - A‖_F² s.t. X - αI ⪰ 0`, an oracle
    /// independent of the closed-form clipping.
    fn projected_gradient_oracle(a: &CMat, alpha: f64) -> CMat {
        // Projection onto {X : X ⪰ αI} by bisection-free power iterations is
        // itself an eigenproblem; here the 2x2 projection uses the explicit
        // quadratic formula for the eigenvalues instead.
        let project = |x: &CMat| -> CMat {
            let (p, q, r) = (x[(0, 0)].re, x[(1, 1)].re, x[(0, 1)]);
            let mean = 0.5 * (p + q);
            let rad = (0.25 * (p - q).powi(2) + r.norm_sqr()).sqrt();
            let (l1, l2) = (mean - rad, mean + rad);
            if l1 >= alpha {
                return x.clone();
            }
            // Eigenvector of l1 from (X - l2 I) columns.
            let v = if r.norm() > 1e-300 {
                CVec::from_vec(vec![r, c(l1 - p, 0.0)])
            } else if p <= q {
                CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)])
            } else {
                CVec::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)])
            };
            let v = &v / c(v.norm(), 0.0);
            let mut out = x + (&v * v.adjoint()).scale(alpha - l1);
            if l2 < alpha {
                let w = CVec::from_vec(vec![-v[1].conj(), v[0].conj()]);
                out += (&w * w.adjoint()).scale(alpha - l2);
            }
            out
        };
        let mut x = project(a);
        for _ in 0..2000 {
            let grad = (&x - a).scale(2.0);
            x = project(&(&x - grad.scale(0.25)));
        }
        x
    }

    #[test]
    fn clipping_matches_projected_gradient_oracle() {
        // Eigenvalues (3, -1) with a non-trivial eigenbasis.
        let u = CMat::from_row_slice(2, 2, &[c(0.6, 0.0), c(0.0, -0.8), c(0.0, -0.8), c(0.6, 0.0)]);
        let d = CMat::from_diagonal(&CVec::from_vec(vec![c(3.0, 0.0), c(-1.0, 0.0)]));
        let a = &u * d * u.adjoint();
        let (out, clipped) = nearest_psd_regularized(&a, 0.5).unwrap();
        assert_eq!(clipped, 1);
        let (values, _) = hermitian_eigen(&out);
        assert_relative_eq!(values[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(values[1], 3.0, epsilon = 1e-12);
        let oracle = projected_gradient_oracle(&a, 0.5);
        assert!(frobenius(&(out - oracle)) < 1e-8);
    }

    #[test]
    fn diagnostics_examples() {
        let d = spectral_diagnostics(&CMat::identity(4, 4));
        assert_relative_eq!(d.condition_number, 1.0);
        let d = spectral_diagnostics(&CMat::from_diagonal(&CVec::from_vec(vec![c(10.0, 0.0), c(1.0, 0.0)])));
        assert_relative_eq!(d.condition_number, 10.0, epsilon = 1e-12);
        assert_relative_eq!(d.lambda_min, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn block_count_scaling() {
        let est = CovarianceEstimate::gaussian(&scalar(2.0), &scalar(0.0), 4).unwrap();
        assert_relative_eq!(est.sigma[(0, 0)].re, 1.0);
        assert_relative_eq!(est.per_block()[(0, 0)].re, 4.0);
        assert_relative_eq!(est.with_block_count(8).unwrap().sigma[(0, 0)].re, 0.5);
    }

    proptest! {
        #[test]
        fn repair_is_idempotent_and_floors(seed in 0u64..300, alpha in 0.01..2.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = standard_complex_normal_vec(&mut rng, 16);
            let w = standard_complex_normal_vec(&mut rng, 16);
            let a = hermitian_part(&(&v * w.adjoint()));
            let (once, _) = nearest_psd_regularized(&a, alpha).unwrap();
            let (twice, clipped) = nearest_psd_regularized(&once, alpha).unwrap();
            prop_assert!(frobenius(&(&once - &twice)) <= 1e-10 * frobenius(&once));
            prop_assert!(clipped <= 16);
            prop_assert!(min_eigenvalue(&once) >= alpha * (1.0 - 1e-9));
        }
    }
}
