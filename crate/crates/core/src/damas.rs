//! DAMAS deconvolution with weighted point-spread functions.
//!
//! The system `H q = b` has `H[n][l] = Re ψ_W(y_n, y_l)`, the weighted beamformer
//! at focus `y_n` for a unit monopole at `y_l`, and `b[n] = Re I_W(y_n)`.
//! Non-negative (optionally Tikhonov-regularized) least squares is solved by an
//! accelerated projected-gradient warm start followed by a Lawson-Hanson active
//! set method on the normal equations, which ends with a KKT certificate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::beamforming::{weighted_steering, SourceMap};
use crate::error::{Error, Result};
use crate::geometry::{propagation_vector, FlowField, FocusGrid, MicArray};
use crate::linalg::{inner, CMat, CVec};
use crate::weighting::{SelectionMask, WeightingScheme};

/// `ψ_W(y, y') = <ḡ(y'), ḡ(y)>_W / <ḡ(y), ḡ(y)>_W` from the steering vectors at
/// the focus point `y` and the source point `y'`.
pub fn psf_value(w: &WeightingScheme, mask: &SelectionMask, g_focus: &CVec, g_source: &CVec) -> Result<Complex64> {
    if w.dim() != mask.len() {
        return Err(Error::InconsistentInputs(format!(
            "weighting has dimension {} but mask retains {} entries",
            w.dim(),
            mask.len()
        )));
    }
    let ws = weighted_steering(w, mask, g_focus)?;
    let source = mask.reduce_rank_one(g_source)?;
    Ok(inner(&source, &ws.u) / ws.denominator)
}

#[derive(Debug, Clone)]
pub struct DamasSystem {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub weighting: String,
    pub mask: String,
    pub grid: FocusGrid,
    /// Angular frequency at which `H` was assembled.
    pub omega: f64,
}

fn steering_matrix(grid: &FocusGrid, array: &MicArray, omega: f64, flow: &FlowField) -> Result<CMat> {
    let cols = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(n, y)| propagation_vector(array, y, omega, flow).map_err(|e| Error::at_point(n, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CMat::from_columns(&cols))
}

fn is_diagonal_removal(mask: &SelectionMask) -> bool {
    *mask == SelectionMask::diagonal_removal(mask.mics())
}

/// Real PSF matrix `H[n][l] = Re ψ_W(y_n, y_l)` with unit diagonal.
pub fn psf_matrix(
    w: &WeightingScheme,
    mask: &SelectionMask,
    grid: &FocusGrid,
    array: &MicArray,
    omega: f64,
    flow: &FlowField,
) -> Result<DMatrix<f64>> {
    if w.dim() != mask.len() {
        return Err(Error::InconsistentInputs(format!(
            "weighting has dimension {} but mask retains {} entries",
            w.dim(),
            mask.len()
        )));
    }
    if mask.mics() != array.len() {
        return Err(Error::DimensionMismatch {
            expected: array.len(),
            got: mask.mics(),
        });
    }
    let g = steering_matrix(grid, array, omega, flow)?;
    let n = grid.len();

    let (cross, den) = match w {
        WeightingScheme::ScaledIdentity { .. } if mask.is_identity() || is_diagonal_removal(mask) => {
            // <ḡ_l, ḡ_n> = |g_nᴴ g_l|², minus Σ_m |g_nm|² |g_lm|² without auto-spectra.
            let s = g.adjoint() * &g;
            let mut cross = s.map(|z| z.norm_sqr());
            if !mask.is_identity() {
                let a = g.map(|z| z.norm_sqr());
                cross -= a.transpose() * &a;
            }
            let den = DVector::from_fn(n, |i, _| cross[(i, i)]);
            (cross, den)
        }
        _ => {
            let gbar_cols = (0..n)
                .into_par_iter()
                .map(|l| mask.reduce_rank_one(&g.column(l).into_owned()))
                .collect::<Result<Vec<_>>>()?;
            let gbar = CMat::from_columns(&gbar_cols);
            let u = w.apply_inverse_columns(&gbar)?;
            let d = gbar.nrows();
            let stack = |m: &CMat| {
                DMatrix::from_fn(2 * d, n, |r, c| if r < d { m[(r, c)].re } else { m[(r - d, c)].im })
            };
            let xr = stack(&gbar);
            let yr = stack(&u);
            let cross = yr.transpose() * xr;
            let den = DVector::from_fn(n, |i, _| cross[(i, i)]);
            (cross, den)
        }
    };

    if let Some(i) = den.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::at_point(i, Error::DegenerateSteering));
    }
    let mut h = cross;
    for (r, mut row) in h.row_iter_mut().enumerate() {
        row /= den[r];
    }
    h.fill_diagonal(1.0);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PSF matrix".into()));
    }
    Ok(h)
}

/// Builds `H q = b` from a source map computed with the same weighting, mask
/// and grid. `H` is assembled at `omega` (the band center for band maps).
pub fn assemble_system(
    w: &WeightingScheme,
    mask: &SelectionMask,
    grid: &FocusGrid,
    map: &SourceMap,
    array: &MicArray,
    omega: f64,
    flow: &FlowField,
) -> Result<DamasSystem> {
    if map.grid != *grid {
        return Err(Error::InconsistentInputs("source map was computed on a different grid".into()));
    }
    if map.weighting != w.descriptor() {
        return Err(Error::InconsistentInputs(format!(
            "source map weighting '{}' differs from '{}'",
            map.weighting,
            w.descriptor()
        )));
    }
    if map.mask != mask.label() {
        return Err(Error::InconsistentInputs(format!(
            "source map mask '{}' differs from '{}'",
            map.mask,
            mask.label()
        )));
    }
    let h = psf_matrix(w, mask, grid, array, omega, flow)?;
    let b = DVector::from_iterator(map.len(), map.values.iter().map(|v| v.re));
    Ok(DamasSystem {
        h,
        b,
        weighting: map.weighting.clone(),
        mask: map.mask.clone(),
        grid: grid.clone(),
        omega,
    })
}

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub q: DVector<f64>,
    pub alpha: f64,
    /// `‖Hq − b‖² + α‖q‖²`.
    pub objective: f64,
    pub residual_norm: f64,
    pub kkt_residual: f64,
    pub tolerance: f64,
    pub iterations: usize,
}

/// Normal-equation data shared by solves with different `α`.
#[derive(Debug, Clone)]
pub struct NnlsProblem {
    h: DMatrix<f64>,
    b: DVector<f64>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    lambda_max: f64,
    tolerance: f64,
}

const WARM_START_ITERATIONS: usize = 300;

impl NnlsProblem {
    pub fn new(h: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if h.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: h.nrows(),
                got: b.len(),
            });
        }
        if h.ncols() == 0 {
            return Err(Error::InvalidArgument("NNLS needs at least one unknown".into()));
        }
        if h.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("NNLS inputs".into()));
        }
        let gram = h.tr_mul(&h);
        let rhs = h.tr_mul(&b);
        let lambda_max = largest_eigenvalue(&gram);
        let tolerance = 1e-8 * rhs.amax().max(f64::MIN_POSITIVE);
        Ok(NnlsProblem {
            h,
            b,
            gram,
            rhs,
            lambda_max,
            tolerance,
        })
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn len(&self) -> usize {
        self.h.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.h.ncols() == 0
    }

    /// `‖H‖_F² / N`, the scale used for the regularization bracket.
    pub fn alpha_scale(&self) -> f64 {
        self.gram.trace() / self.len() as f64
    }

    pub fn residual_norm(&self, q: &DVector<f64>) -> f64 {
        (&self.h * q - &self.b).norm()
    }

    pub fn solve(&self, alpha: f64) -> Result<NnlsSolution> {
        self.solve_from(alpha, None)
    }

    /// Solves with an optional starting guess (e.g. the solution for a nearby `α`).
    pub fn solve_from(&self, alpha: f64, start: Option<&DVector<f64>>) -> Result<NnlsSolution> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        let n = self.len();
        let mut q_mat = self.gram.clone();
        for i in 0..n {
            q_mat[(i, i)] += alpha;
        }
        let warm = self.projected_gradient(&q_mat, alpha, start);
        let (q, iterations) = active_set(&q_mat, &self.rhs, &warm, self.tolerance)?;
        let kkt_residual = kkt_residual(&q_mat, &self.rhs, &q);
        let residual_norm = self.residual_norm(&q);
        Ok(NnlsSolution {
            objective: residual_norm * residual_norm + alpha * q.norm_squared(),
            q,
            alpha,
            residual_norm,
            kkt_residual,
            tolerance: self.tolerance,
            iterations,
        })
    }

    fn projected_gradient(&self, q_mat: &DMatrix<f64>, alpha: f64, start: Option<&DVector<f64>>) -> DVector<f64> {
        let n = self.len();
        let lipschitz = (self.lambda_max + alpha) * 1.01;
        let mut x = match start {
            Some(s) if s.len() == n => s.map(|v| v.max(0.0)),
            _ => DVector::zeros(n),
        };
        if !(lipschitz > 0.0) {
            return x;
        }
        let step = 1.0 / lipschitz;
        let mut y = x.clone();
        let mut t: f64 = 1.0;
        for _ in 0..WARM_START_ITERATIONS {
            let grad = q_mat * &y - &self.rhs;
            let next = (&y - grad * step).map(|v| v.max(0.0));
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            x = next;
            t = t_next;
        }
        x
    }
}

fn largest_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w / norm;
        if (next - lambda).abs() <= 1e-6 * next {
            return next;
        }
        lambda = next;
    }
    // Power iteration converges from below; cap by the Gershgorin bound.
    let gershgorin = a.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    lambda.max(gershgorin.min(lambda * 2.0))
}

/// Largest violation of the optimality conditions of `½qᵀQq − cᵀq` over `q ≥ 0`.
fn kkt_residual(q_mat: &DMatrix<f64>, c: &DVector<f64>, q: &DVector<f64>) -> f64 {
    let grad = q_mat * q - c;
    q.iter()
        .zip(grad.iter())
        .map(|(&x, &g)| if x > 0.0 { g.abs() } else { (-g).max(0.0) })
        .fold(0.0, f64::max)
}

fn solve_passive(q_mat: &DMatrix<f64>, c: &DVector<f64>, passive: &[usize]) -> DVector<f64> {
    let k = passive.len();
    let sub = DMatrix::from_fn(k, k, |i, j| q_mat[(passive[i], passive[j])]);
    let rhs = DVector::from_fn(k, |i, _| c[passive[i]]);
    if let Some(chol) = sub.clone().cholesky() {
        let mut s = chol.solve(&rhs);
        let correction = chol.solve(&(&rhs - &sub * &s));
        s += correction;
        return s;
    }
    let eps = 1e-14 * sub.amax().max(f64::MIN_POSITIVE);
    sub.svd(true, true)
        .solve(&rhs, eps)
        .unwrap_or_else(|_| DVector::zeros(k))
}

/// Lawson-Hanson active set iteration on the normal equations, started from the
/// support of `warm` when that support is already a feasible passive set.
fn active_set(q_mat: &DMatrix<f64>, c: &DVector<f64>, warm: &DVector<f64>, tol: f64) -> Result<(DVector<f64>, usize)> {
    let n = c.len();
    let cap = 10 * n + 100;
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];

    let support: Vec<usize> = (0..n).filter(|&i| warm[i] > 0.0).collect();
    if !support.is_empty() {
        let s = solve_passive(q_mat, c, &support);
        if s.iter().all(|&v| v > 0.0) {
            for (k, &i) in support.iter().enumerate() {
                x[i] = s[k];
                passive[i] = true;
            }
        }
    }

    let mut iterations = 0;
    let mut blocked = vec![false; n];
    loop {
        let w = c - q_mat * &x;
        let candidate = (0..n)
            .filter(|&i| !passive[i] && !blocked[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        let before = x.clone();
        loop {
            iterations += 1;
            if iterations > cap {
                return Err(Error::NonConvergence {
                    iterations,
                    kkt_residual: kkt_residual(q_mat, c, &x),
                });
            }
            let set: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let s = solve_passive(q_mat, c, &set);
            if s.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &i) in set.iter().enumerate() {
                    x[i] = s[k];
                }
                break;
            }
            let mut step: f64 = 1.0;
            for (k, &i) in set.iter().enumerate() {
                if s[k] <= 0.0 {
                    let denom = x[i] - s[k];
                    if denom > 0.0 {
                        step = step.min(x[i] / denom);
                    }
                }
            }
            for (k, &i) in set.iter().enumerate() {
                x[i] += step * (s[k] - x[i]);
                if x[i] <= 0.0 || (s[k] <= 0.0 && x[i] <= 1e-15 * s.amax()) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if set.iter().all(|&i| !passive[i]) {
                break;
            }
        }
        if x == before {
            blocked[j] = true;
        } else {
            blocked.fill(false);
        }
    }
    Ok((x, iterations))
}

/// Minimizes `‖Hq − b‖² + α‖q‖²` over `q ≥ 0`.
pub fn nnls_solve(h: &DMatrix<f64>, b: &DVector<f64>, alpha: f64) -> Result<NnlsSolution> {
    NnlsProblem::new(h.clone(), b.clone())?.solve(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscrepancyFlag {
    /// The returned `α` is the bisection result inside the bracket.
    Satisfied,
    /// The bound holds even at the bracket maximum (returned).
    OverRegularized,
    /// The bound fails even at the bracket minimum (returned).
    UnderRegularized,
}

impl DiscrepancyFlag {
    pub fn name(self) -> &'static str {
        match self {
            DiscrepancyFlag::Satisfied => "satisfied",
            DiscrepancyFlag::OverRegularized => "over-regularized",
            DiscrepancyFlag::UnderRegularized => "under-regularized",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiscrepancyChoice {
    pub alpha: f64,
    pub residual: f64,
    pub target: f64,
    pub flag: DiscrepancyFlag,
    pub bracket: (f64, f64),
    pub solution: NnlsSolution,
}

#[derive(Debug, Clone, Copy)]
pub struct DiscrepancySettings {
    pub tau: f64,
    /// Bracket `[lo, hi]` as multiples of `‖H‖_F² / N`.
    pub bracket: (f64, f64),
    /// Bisection stops when `hi / lo ≤ 1 + rel_tol`.
    pub rel_tol: f64,
}

impl Default for DiscrepancySettings {
    fn default() -> Self {
        DiscrepancySettings {
            tau: 1.5,
            bracket: (1e-8, 1e8),
            rel_tol: 1e-3,
        }
    }
}

/// Largest `α` in the bracket with `‖Hq_α − b‖ ≤ τδ`.
pub fn discrepancy_alpha(h: &DMatrix<f64>, b: &DVector<f64>, delta: f64, tau: f64) -> Result<DiscrepancyChoice> {
    let problem = NnlsProblem::new(h.clone(), b.clone())?;
    let settings = DiscrepancySettings {
        tau,
        ..DiscrepancySettings::default()
    };
    discrepancy_alpha_with(&problem, delta, &settings)
}

pub fn discrepancy_alpha_with(problem: &NnlsProblem, delta: f64, settings: &DiscrepancySettings) -> Result<DiscrepancyChoice> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("noise level must be positive, got {delta}")));
    }
    if !(settings.tau >= 1.0) || !settings.tau.is_finite() {
        return Err(Error::InvalidArgument(format!("tau must be >= 1, got {}", settings.tau)));
    }
    let (lo_factor, hi_factor) = settings.bracket;
    if !(lo_factor > 0.0 && hi_factor > lo_factor) || !(settings.rel_tol > 0.0) {
        return Err(Error::InvalidArgument("invalid discrepancy bracket or tolerance".into()));
    }
    let scale = problem.alpha_scale().max(f64::MIN_POSITIVE);
    let bracket = (lo_factor * scale, hi_factor * scale);
    let target = settings.tau * delta;
    let choice = |solution: NnlsSolution, flag| DiscrepancyChoice {
        alpha: solution.alpha,
        residual: solution.residual_norm,
        target,
        flag,
        bracket,
        solution,
    };

    let high = problem.solve(bracket.1)?;
    if target >= problem.b().norm() || high.residual_norm <= target {
        return Ok(choice(high, DiscrepancyFlag::OverRegularized));
    }
    let low = problem.solve(bracket.0)?;
    if low.residual_norm > target {
        return Ok(choice(low, DiscrepancyFlag::UnderRegularized));
    }
    let (mut lo, mut hi) = (low, high);
    while hi.alpha / lo.alpha > 1.0 + settings.rel_tol {
        let mid_alpha = (lo.alpha * hi.alpha).sqrt();
        let mid = problem.solve_from(mid_alpha, Some(&lo.q))?;
        if mid.residual_norm <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(choice(lo, DiscrepancyFlag::Satisfied))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforming::{beamform_map, beamform_point};
    use crate::geometry::{build_focus_grid, Point3};
    use crate::synth::standard_complex_normal_vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_hpd(rng: &mut ChaCha8Rng, n: usize) -> CMat {
        let mut a = CMat::identity(n, n).scale(0.05);
        for _ in 0..n + 2 {
            let v = standard_complex_normal_vec(rng, n);
            a += &v * v.adjoint();
        }
        a
    }

    fn random_real(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn psf_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = SelectionMask::none(3);
        let ws = [
            WeightingScheme::scaled_identity(9, 1.0).unwrap(),
            WeightingScheme::dense(random_hpd(&mut rng, 9)).unwrap(),
            WeightingScheme::kronecker(random_hpd(&mut rng, 3)).unwrap(),
        ];
        for w in &ws {
            let g = standard_complex_normal_vec(&mut rng, 3);
            let h = standard_complex_normal_vec(&mut rng, 3);
            assert!((psf_value(w, &mask, &g, &g).unwrap() - 1.0).norm() < 1e-12);
            let via_beamformer = beamform_point(&(&h * h.adjoint()), w, &mask, &g).unwrap();
            assert!((psf_value(w, &mask, &g, &h).unwrap() - via_beamformer).norm() < 1e-12 * via_beamformer.norm().max(1.0));
        }
        let g = standard_complex_normal_vec(&mut rng, 3);
        let h = standard_complex_normal_vec(&mut rng, 3);
        let conventional = psf_value(&ws[0], &mask, &g, &h).unwrap();
        let oracle = g.dotc(&h).norm_sqr() / g.norm_squared().powi(2);
        assert!(conventional.im.abs() < 1e-14);
        assert_relative_eq!(conventional.re, oracle, max_relative = 1e-12);
    }

    fn setup() -> (MicArray, FocusGrid, FlowField, f64) {
        let array = MicArray::spiral(8, 1.0).unwrap();
        let grid = build_focus_grid(Point3::new(-0.3, -0.3, 0.75), 0.15, 0.15, 5, 5).unwrap();
        (array, grid, FlowField::default(), 2.0 * PI * 4000.0)
    }

    #[test]
    fn psf_matrix_matches_pointwise_definition() {
        let (array, grid, flow, omega) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for mask in [SelectionMask::none(8), SelectionMask::diagonal_removal(8)] {
            let ws = [
                WeightingScheme::scaled_identity(mask.len(), 2.0).unwrap(),
                WeightingScheme::kronecker(random_hpd(&mut rng, 8)).unwrap().reduce(&mask).unwrap(),
            ];
            for w in &ws {
                let h = psf_matrix(w, &mask, &grid, &array, omega, &flow).unwrap();
                for n in 0..grid.len() {
                    assert_eq!(h[(n, n)], 1.0);
                    let gn = propagation_vector(&array, &grid.points()[n], omega, &flow).unwrap();
                    for l in (0..grid.len()).step_by(3) {
                        let gl = propagation_vector(&array, &grid.points()[l], omega, &flow).unwrap();
                        let oracle = psf_value(w, &mask, &gn, &gl).unwrap().re;
                        assert!((h[(n, l)] - oracle).abs() < 1e-10, "{} {n} {l}", w.kind());
                    }
                }
            }
        }
    }

    #[test]
    fn assembly_examples() {
        let (array, grid, flow, omega) = setup();
        let mask = SelectionMask::diagonal_removal(8);
        let w = WeightingScheme::scaled_identity(mask.len(), 1.0).unwrap();
        let s = 12;
        let g = propagation_vector(&array, &grid.points()[s], omega, &flow).unwrap();
        let csm = &g * g.adjoint();
        let map = beamform_map(&csm, &w, &mask, &grid, &array, omega, &flow).unwrap();
        let sys = assemble_system(&w, &mask, &grid, &map, &array, omega, &flow).unwrap();
        for n in 0..grid.len() {
            assert!((sys.b[n] - sys.h[(n, s)]).abs() < 1e-12);
        }

        let single = FocusGrid::from_points(vec![grid.points()[3]]).unwrap();
        let map1 = beamform_map(&csm, &w, &mask, &single, &array, omega, &flow).unwrap();
        let sys1 = assemble_system(&w, &mask, &single, &map1, &array, omega, &flow).unwrap();
        assert_eq!(sys1.h.as_slice(), &[1.0]);
        assert_eq!(sys1.b[0], map1.values[0].re);

        let other = WeightingScheme::diagonal(DVector::from_element(mask.len(), 1.0)).unwrap();
        assert!(matches!(
            assemble_system(&other, &mask, &grid, &map, &array, omega, &flow),
            Err(Error::InconsistentInputs(_))
        ));
        assert!(matches!(
            assemble_system(&w, &mask, &single, &map, &array, omega, &flow),
            Err(Error::InconsistentInputs(_))
        ));
    }

    #[test]
    fn distant_points_decouple_at_high_frequency() {
        let array = MicArray::spiral(32, 1.5).unwrap();
        let flow = FlowField::default();
        let omega = 2.0 * PI * 16000.0;
        let grid = FocusGrid::from_points(vec![Point3::new(-0.5, 0.0, 0.75), Point3::new(0.5, 0.0, 0.75)]).unwrap();
        let w = WeightingScheme::scaled_identity(1024, 1.0).unwrap();
        let h = psf_matrix(&w, &SelectionMask::none(32), &grid, &array, omega, &flow).unwrap();
        let g0 = propagation_vector(&array, &grid.points()[0], omega, &flow).unwrap();
        let g1 = propagation_vector(&array, &grid.points()[1], omega, &flow).unwrap();
        let oracle = g0.dotc(&g1).norm_sqr() / g0.norm_squared().powi(2);
        assert_relative_eq!(h[(0, 1)], oracle, max_relative = 1e-10);
        assert!(h[(0, 1)].abs() < 0.1 && h[(1, 0)].abs() < 0.1, "{h}");
    }

    #[test]
    fn nnls_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let b = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let sol = nnls_solve(&id, &b, 0.0).unwrap();
        assert!((sol.q - &b).norm() < 1e-12);

        let id2 = DMatrix::<f64>::identity(2, 2);
        let sol = nnls_solve(&id2, &DVector::from_vec(vec![1.0, -2.0]), 0.0).unwrap();
        assert!((sol.q - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-12);
        assert!(sol.kkt_residual <= sol.tolerance);

        let mut bad = id2.clone();
        bad[(0, 1)] = f64::NAN;
        assert!(matches!(nnls_solve(&bad, &DVector::zeros(2), 0.0), Err(Error::NonFinite(_))));
        assert!(nnls_solve(&id2, &DVector::zeros(2), -1.0).is_err());
        assert_eq!(nnls_solve(&id2, &DVector::zeros(2), 0.0).unwrap().q, DVector::zeros(2));
    }

    /// Exhaustive search over all passive sets of `min ‖Hq−b‖² + α‖q‖², q ≥ 0`.
    fn enumeration_oracle(h: &DMatrix<f64>, b: &DVector<f64>, alpha: f64) -> DVector<f64> {
        let n = h.ncols();
        let q_mat = h.transpose() * h + DMatrix::identity(n, n) * alpha;
        let c = h.transpose() * b;
        let mut best: Option<(f64, DVector<f64>)> = None;
        for pattern in 0u32..(1 << n) {
            let set: Vec<usize> = (0..n).filter(|i| pattern & (1 << i) != 0).collect();
            let mut x = DVector::zeros(n);
            if !set.is_empty() {
                let sub = DMatrix::from_fn(set.len(), set.len(), |i, j| q_mat[(set[i], set[j])]);
                let rhs = DVector::from_fn(set.len(), |i, _| c[set[i]]);
                let Some(s) = sub.lu().solve(&rhs) else { continue };
                if s.iter().any(|&v| v < 0.0) {
                    continue;
                }
                for (k, &i) in set.iter().enumerate() {
                    x[i] = s[k];
                }
            }
            let f = (h * &x - b).norm_squared() + alpha * x.norm_squared();
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn nnls_matches_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let h = random_real(&mut rng, 6, 6);
            let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let sol = nnls_solve(&h, &b, 0.1).unwrap();
            let oracle = enumeration_oracle(&h, &b, 0.1);
            assert!((&sol.q - &oracle).amax() < 1e-8, "{} vs {}", sol.q, oracle);
            assert!(sol.kkt_residual <= sol.tolerance);
        }
    }

    #[test]
    fn nnls_on_non_square_and_rank_deficient_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_real(&mut rng, 10, 4);
        let b = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
        let sol = nnls_solve(&h, &b, 0.0).unwrap();
        let oracle = enumeration_oracle(&h, &b, 0.0);
        assert_relative_eq!(sol.objective, (&h * &oracle - &b).norm_squared(), max_relative = 1e-10);

        // Duplicate columns: the α = 0 minimizer is not unique, only its objective is.
        let mut dup = random_real(&mut rng, 5, 3);
        dup.set_column(2, &dup.column(0).into_owned());
        let b = DVector::from_fn(5, |_, _| rng.random_range(0.0..1.0));
        let sol = nnls_solve(&dup, &b, 0.0).unwrap();
        let oracle = enumeration_oracle(&dup.columns(0, 2).into_owned(), &b, 0.0);
        let best = (dup.columns(0, 2) * &oracle - &b).norm_squared();
        assert!((sol.objective - best).abs() <= 1e-10 * best.max(1.0));
    }

    #[test]
    fn regularized_solution_equals_augmented_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h = random_real(&mut rng, 7, 7);
            let b = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            let alpha: f64 = rng.random_range(0.01..2.0);
            let mut stacked = DMatrix::zeros(14, 7);
            stacked.view_mut((0, 0), (7, 7)).copy_from(&h);
            stacked.view_mut((7, 0), (7, 7)).copy_from(&(DMatrix::identity(7, 7) * alpha.sqrt()));
            let mut rhs = DVector::zeros(14);
            rhs.rows_mut(0, 7).copy_from(&b);
            let a = nnls_solve(&h, &b, alpha).unwrap();
            let s = nnls_solve(&stacked, &rhs, 0.0).unwrap();
            assert!((a.q - s.q).amax() < 1e-9);
        }
    }

    #[test]
    fn unit_monopole_is_recovered() {
        let (array, grid, flow, omega) = setup();
        let mask = SelectionMask::none(8);
        let w = WeightingScheme::scaled_identity(64, 1.0).unwrap();
        let h = psf_matrix(&w, &mask, &grid, &array, omega, &flow).unwrap();
        let s = 7;
        let b = h.column(s).into_owned();
        let sol = nnls_solve(&h, &b, 0.0).unwrap();
        assert!(sol.q[s] >= 0.99);
        let l1: f64 = sol.q.iter().enumerate().map(|(i, &v)| if i == s { (v - 1.0).abs() } else { v.abs() }).sum();
        assert!(l1 <= 0.05);
        let reg = nnls_solve(&h, &b, 0.1).unwrap();
        let peak = reg.q.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, s);
    }

    #[test]
    fn discrepancy_examples() {
        let n = 4;
        let h = DMatrix::<f64>::identity(n, n);
        let mut b = DVector::zeros(n);
        b[0] = 1.0;
        let over = discrepancy_alpha(&h, &b, 1.0, 1.0).unwrap();
        assert_eq!(over.flag, DiscrepancyFlag::OverRegularized);
        assert_eq!(over.alpha, over.bracket.1);

        // Ridge on the identity: residual(α) = α/(1+α)·‖b‖.
        let choice = discrepancy_alpha(&h, &b, 0.5, 1.0).unwrap();
        assert_eq!(choice.flag, DiscrepancyFlag::Satisfied);
        assert!((choice.alpha - 1.0).abs() <= 1e-3);
        assert!(choice.alpha <= 1.0 + 1e-12);
        assert!(choice.residual <= 0.5 + 1e-12);

        let flat = discrepancy_alpha(&DMatrix::zeros(2, 2), &DVector::from_vec(vec![1.0, 1.0]), 0.1, 1.5);
        assert_eq!(flat.unwrap().flag, DiscrepancyFlag::UnderRegularized);
        let b = DVector::from_vec(vec![1.0, -1.0]);
        let under = discrepancy_alpha(&DMatrix::identity(2, 2), &b, 0.1, 1.5).unwrap();
        assert_eq!(under.flag, DiscrepancyFlag::UnderRegularized);
        assert_eq!(under.alpha, under.bracket.0);

        assert!(discrepancy_alpha(&h, &b.rows(0, 2).into_owned(), 0.0, 1.5).is_err());
        assert!(discrepancy_alpha(&h, &DVector::zeros(4), 1.0, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn residual_and_norm_are_monotone_in_alpha(seed in 0u64..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_real(&mut rng, 6, 6);
            let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let problem = NnlsProblem::new(h, b).unwrap();
            let mut last: Option<NnlsSolution> = None;
            for k in -6..=4 {
                let sol = problem.solve(10f64.powi(k)).unwrap();
                if let Some(prev) = &last {
                    prop_assert!(sol.residual_norm >= prev.residual_norm - 1e-10);
                    prop_assert!(sol.q.norm() <= prev.q.norm() + 1e-10);
                }
                last = Some(sol);
            }
        }

        #[test]
        fn nnls_certificate_holds(seed in 0u64..100, alpha in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = random_real(&mut rng, 8, 5);
            let b = DVector::from_fn(8, |_, _| rng.random_range(-1.0..1.0));
            let sol = nnls_solve(&h, &b, alpha).unwrap();
            prop_assert!(sol.q.iter().all(|&v| v >= 0.0));
            prop_assert!(sol.kkt_residual <= sol.tolerance.max(1e-12));
        }
    }
}
