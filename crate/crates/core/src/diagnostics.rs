//! Source-map quality metrics and checks of the statistical data model.

use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::beamforming::SourceMap;
use crate::covariance::gaussian_covariance_norms;
use crate::error::{Error, Result};
use crate::geometry::Lattice;
use crate::linalg::{frobenius, CMat};
use crate::spectra::{csm_at, pcsm_at, BlockSamples};

/// Level below the maximum that delimits the main lobe for the resolution measure.
pub const RESOLUTION_LEVEL_DB: f64 = -1.0;

fn lattice_of(map: &SourceMap) -> Result<&Lattice> {
    map.grid
        .lattice()
        .ok_or_else(|| Error::UnsupportedGrid("metric needs a planar lattice grid".into()))
}

fn positive_peak(map: &SourceMap) -> Result<(usize, f64)> {
    if map.powers.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("source map powers".into()));
    }
    let (peak, max) = map.peak();
    if !(max > 0.0) {
        return Err(Error::UndefinedMetric("map has no positive power".into()));
    }
    Ok((peak, max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolutionReport {
    /// Largest distance from the peak over the whole −1 dB super-level set.
    pub literal: f64,
    /// Same, restricted to the 8-connected component containing the peak.
    pub main_lobe: f64,
}

pub fn resolution_measure(map: &SourceMap) -> Result<ResolutionReport> {
    let lattice = lattice_of(map)?;
    let (peak, max) = positive_peak(map)?;
    let threshold = max * 10f64.powf(RESOLUTION_LEVEL_DB / 10.0);
    let inside: Vec<bool> = map.powers.iter().map(|&p| p >= threshold).collect();
    let points = map.grid.points();
    let distance = |n: usize| (points[n] - points[peak]).norm();

    let literal = (0..map.len())
        .filter(|&n| inside[n])
        .map(distance)
        .fold(0.0, f64::max);

    let mut seen = vec![false; map.len()];
    let mut stack = vec![peak];
    seen[peak] = true;
    let mut main_lobe: f64 = 0.0;
    while let Some(n) = stack.pop() {
        main_lobe = main_lobe.max(distance(n));
        for k in lattice.neighbours(n) {
            if inside[k] && !seen[k] {
                seen[k] = true;
                stack.push(k);
            }
        }
    }
    Ok(ResolutionReport { literal, main_lobe })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrReport {
    /// Main lobe to largest sidelobe in dB (or the dynamic range when no
    /// sidelobe exists).
    pub value_db: f64,
    pub no_sidelobe: bool,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Sweeps the distinct power levels from the top down, adding cells to a
/// union-find over the lattice; the first level at which the super-level set
/// has more than one 8-connected component gives the SNR.
pub fn snr_measure(map: &SourceMap) -> Result<SnrReport> {
    let lattice = lattice_of(map)?;
    let (_, max) = positive_peak(map)?;
    let n = map.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| map.powers[b].total_cmp(&map.powers[a]));

    let level_db = |p: f64| if p > 0.0 { 10.0 * (p / max).log10() } else { f64::NEG_INFINITY };
    let mut uf = UnionFind::new(n);
    let mut active = vec![false; n];
    let mut components = 0usize;
    let mut i = 0;
    while i < n {
        let value = map.powers[order[i]];
        let mut k = i;
        while k < n && map.powers[order[k]] == value {
            let cell = order[k];
            active[cell] = true;
            components += 1;
            for nb in lattice.neighbours(cell) {
                if active[nb] && uf.union(cell, nb) {
                    components -= 1;
                }
            }
            k += 1;
        }
        if components > 1 {
            return Ok(SnrReport {
                value_db: level_db(value).abs(),
                no_sidelobe: false,
            });
        }
        i = k;
    }
    let min_positive = map.powers.iter().copied().filter(|&p| p > 0.0).fold(max, f64::min);
    Ok(SnrReport {
        value_db: -level_db(min_positive),
        no_sidelobe: true,
    })
}

/// Source-to-pattern ratio `10 log10(max / mean)`.
pub fn spr_measure(map: &SourceMap) -> Result<f64> {
    let (_, max) = positive_peak(map)?;
    let mean = map.powers.iter().sum::<f64>() / map.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::UndefinedMetric("mean power is zero".into()));
    }
    Ok(10.0 * (max / mean).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub resolution: ResolutionReport,
    pub snr: SnrReport,
    pub spr: f64,
}

pub fn map_metrics(map: &SourceMap) -> Result<MetricReport> {
    Ok(MetricReport {
        resolution: resolution_measure(map)?,
        snr: snr_measure(map)?,
        spr: spr_measure(map)?,
    })
}

/// `sqrt(Σ_m |mean_j p_jm|² / Σ_m (mean_j |p_jm|)²)` at frequency index `freq`.
pub fn zero_mean_deviation(blocks: &BlockSamples, freq: usize) -> Result<f64> {
    let (m, j) = (blocks.n_mics(), blocks.n_blocks());
    if j == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for mic in 0..m {
        let mut sum = num_complex::Complex64::new(0.0, 0.0);
        let mut abs_sum = 0.0;
        for b in 0..j {
            let p = blocks.get(b, mic, freq);
            sum += p;
            abs_sum += p.norm();
        }
        num += (sum / j as f64).norm_sqr();
        den += (abs_sum / j as f64).powi(2);
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("all pressure samples are zero".into()));
    }
    Ok((num / den).sqrt())
}

/// Critical values of the adjusted statistic `A*²` for the normality test with
/// estimated mean and variance.
const AD_CRITICAL: [(f64, f64); 5] = [(0.15, 0.576), (0.10, 0.656), (0.05, 0.752), (0.025, 0.873), (0.01, 1.035)];

pub fn ad_critical_value(significance: f64) -> Result<f64> {
    AD_CRITICAL
        .iter()
        .find(|(s, _)| (s - significance).abs() < 1e-12)
        .map(|&(_, c)| c)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "no Anderson-Darling critical value tabulated for significance {significance}"
            ))
        })
}

fn ln_normal_cdf(z: f64) -> f64 {
    (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
}

/// Adjusted statistic `A*² = A²(1 + 0.75/n + 2.25/n²)` with mean and standard
/// deviation estimated from the sample; `None` for a degenerate (constant)
/// sample.
pub fn ad_statistic(samples: &[f64]) -> Option<f64> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return None;
    }
    let mut z: Vec<f64> = samples.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let s: f64 = (0..n)
        .map(|i| (2.0 * i as f64 + 1.0) * (ln_normal_cdf(z[i]) + ln_normal_cdf(-z[n - 1 - i])))
        .sum();
    let a2 = -nf - s / nf;
    Some(a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf)))
}

pub const AD_MIN_SAMPLES: usize = 8;

/// Whether `samples` pass the normality test; degenerate samples fail.
pub fn ad_accepts(samples: &[f64], significance: f64) -> Result<bool> {
    let critical = ad_critical_value(significance)?;
    if samples.len() < AD_MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: AD_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    Ok(ad_statistic(samples).is_some_and(|a| a <= critical))
}

/// Fraction of microphones whose real and imaginary block samples both pass.
pub fn anderson_darling_rate(blocks: &BlockSamples, freq: usize, significance: f64) -> Result<f64> {
    let (m, j) = (blocks.n_mics(), blocks.n_blocks());
    if j < AD_MIN_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: AD_MIN_SAMPLES,
            got: j,
        });
    }
    let mut accepted = 0usize;
    for mic in 0..m {
        let re: Vec<f64> = (0..j).map(|b| blocks.get(b, mic, freq).re).collect();
        let im: Vec<f64> = (0..j).map(|b| blocks.get(b, mic, freq).im).collect();
        if ad_accepts(&re, significance)? && ad_accepts(&im, significance)? {
            accepted += 1;
        }
    }
    Ok(accepted as f64 / m as f64)
}

/// `‖C^ps‖_F / ‖C‖_F`.
pub fn properness_ratio(csm: &CMat, pcsm: &CMat) -> Result<f64> {
    if csm.shape() != pcsm.shape() {
        return Err(Error::InvalidArgument("CSM and PCSM shapes differ".into()));
    }
    let c = frobenius(csm);
    if c == 0.0 {
        return Err(Error::UndefinedMetric("CSM is zero".into()));
    }
    Ok(frobenius(pcsm) / c)
}

/// `min_{a>0} ‖Σ − aI‖² / ‖Σ‖²` in closed form from `‖Σ‖_F²`, `Re tr Σ` and `n`.
fn white_from_norms(frob2: f64, trace_re: f64, n: usize) -> Result<f64> {
    if !(frob2 > 0.0) {
        return Err(Error::UndefinedMetric("covariance is zero".into()));
    }
    let a = (trace_re / n as f64).max(0.0);
    let dev2 = (frob2 - 2.0 * a * trace_re + n as f64 * a * a).max(0.0);
    Ok((dev2 / frob2).sqrt().min(1.0))
}

/// `ε_white = min_{a>0} ‖Σ − aI‖_F / ‖Σ‖_F`.
pub fn white_noise_deviation(sigma: &CMat) -> Result<f64> {
    if !sigma.is_square() {
        return Err(Error::InvalidArgument("covariance must be square".into()));
    }
    let frob2 = sigma.iter().map(|z| z.norm_sqr()).sum::<f64>();
    white_from_norms(frob2, sigma.trace().re, sigma.nrows())
}

/// `ε_white` of the Gaussian-formula covariance built from `csm` and `pcsm`,
/// computed without forming the `M² x M²` matrix.
pub fn white_noise_deviation_gaussian(csm: &CMat, pcsm: &CMat) -> Result<f64> {
    let (frob2, trace) = gaussian_covariance_norms(csm, pcsm)?;
    white_from_norms(frob2, trace.re, csm.nrows() * csm.nrows())
}

/// Per-frequency checks of the statistical data model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsReport {
    /// Angular frequency (rad/s).
    pub omega: f64,
    pub eps_mean: f64,
    pub ad_acceptance_rate: f64,
    pub proper_ratio: f64,
    pub white_noise_dev: f64,
}

pub fn compute_stats(blocks: &BlockSamples, significance: f64) -> Result<Vec<StatsReport>> {
    ad_critical_value(significance)?;
    (0..blocks.n_freqs())
        .into_par_iter()
        .map(|f| {
            let csm = csm_at(blocks, f);
            let pcsm = pcsm_at(blocks, f);
            Ok(StatsReport {
                omega: blocks.freqs()[f],
                eps_mean: zero_mean_deviation(blocks, f)?,
                ad_acceptance_rate: anderson_darling_rate(blocks, f, significance)?,
                proper_ratio: properness_ratio(&csm, &pcsm)?,
                white_noise_dev: white_noise_deviation_gaussian(&csm, &pcsm)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforming::BandDescriptor;
    use crate::covariance::gaussian_covariance_estimate;
    use crate::geometry::{build_focus_grid, FocusGrid, Point3};
    use crate::linalg::CVec;
    use crate::synth::standard_complex_normal_vec;
    use approx::assert_relative_eq;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn lattice_map(nx: usize, ny: usize, d: f64, powers: &[f64]) -> SourceMap {
        let grid = build_focus_grid(Point3::new(0.0, 0.0, 0.75), d, d, nx, ny).unwrap();
        let values = powers.iter().map(|&p| Complex64::new(p, 0.0)).collect();
        SourceMap::new(grid, BandDescriptor::Bin { omega: 1.0 }, values, "w".into(), "m".into()).unwrap()
    }

    fn count_components(lattice: &Lattice, inside: &[bool]) -> usize {
        let mut seen = vec![false; inside.len()];
        let mut count = 0;
        for start in 0..inside.len() {
            if !inside[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(n) = stack.pop() {
                for k in lattice.neighbours(n) {
                    if inside[k] && !seen[k] {
                        seen[k] = true;
                        stack.push(k);
                    }
                }
            }
        }
        count
    }

    /// Flood fill at every distinct level, highest first.
    fn snr_oracle(map: &SourceMap) -> SnrReport {
        let lattice = map.grid.lattice().unwrap();
        let max = map.powers.iter().copied().fold(0.0, f64::max);
        let mut levels = map.powers.clone();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        for &v in &levels {
            let inside: Vec<bool> = map.powers.iter().map(|&p| p >= v).collect();
            if count_components(lattice, &inside) > 1 {
                let db = if v > 0.0 { 10.0 * (v / max).log10() } else { f64::NEG_INFINITY };
                return SnrReport { value_db: db.abs(), no_sidelobe: false };
            }
        }
        let min_pos = map.powers.iter().copied().filter(|&p| p > 0.0).fold(max, f64::min);
        SnrReport { value_db: -10.0 * (min_pos / max).log10(), no_sidelobe: true }
    }

    /// Exhaustive distance sweep with a brute-force flood fill for the main lobe.
    fn resolution_oracle(map: &SourceMap) -> ResolutionReport {
        let lattice = map.grid.lattice().unwrap();
        let max = map.powers.iter().copied().fold(0.0, f64::max);
        let peak = map.powers.iter().position(|&p| p == max).unwrap();
        let inside: Vec<bool> = map.powers.iter().map(|&p| 10.0 * (p / max).log10() >= -1.0).collect();
        let pts = map.grid.points();
        let mut literal: f64 = 0.0;
        for n in 0..map.len() {
            if inside[n] {
                literal = literal.max((pts[n] - pts[peak]).norm());
            }
        }
        let mut reach = vec![false; map.len()];
        reach[peak] = true;
        let mut changed = true;
        while changed {
            changed = false;
            for n in 0..map.len() {
                if reach[n] {
                    for k in lattice.neighbours(n) {
                        if inside[k] && !reach[k] {
                            reach[k] = true;
                            changed = true;
                        }
                    }
                }
            }
        }
        let main_lobe = (0..map.len()).filter(|&n| reach[n]).map(|n| (pts[n] - pts[peak]).norm()).fold(0.0, f64::max);
        ResolutionReport { literal, main_lobe }
    }

    #[test]
    fn resolution_examples() {
        let mut p = vec![0.1; 25];
        p[12] = 1.0;
        assert_eq!(resolution_measure(&lattice_map(5, 5, 0.025, &p)).unwrap().literal, 0.0);
        p[13] = 0.9;
        let r = resolution_measure(&lattice_map(5, 5, 0.025, &p)).unwrap();
        assert_relative_eq!(r.literal, 0.025, max_relative = 1e-12);
        p[0] = 0.95;
        let r = resolution_measure(&lattice_map(5, 5, 0.025, &p)).unwrap();
        assert_relative_eq!(r.literal, (2.0f64).sqrt() * 0.05, max_relative = 1e-12);
        assert_relative_eq!(r.main_lobe, 0.025, max_relative = 1e-12);
        assert!(matches!(resolution_measure(&lattice_map(2, 2, 1.0, &[0.0; 4])), Err(Error::UndefinedMetric(_))));
        let scattered = SourceMap::new(
            FocusGrid::from_points(vec![Point3::new(0.0, 0.0, 1.0)]).unwrap(),
            BandDescriptor::Bin { omega: 1.0 },
            vec![Complex64::new(1.0, 0.0)],
            "w".into(),
            "m".into(),
        )
        .unwrap();
        assert!(matches!(resolution_measure(&scattered), Err(Error::UnsupportedGrid(_))));
    }

    #[test]
    fn resolution_of_radial_gaussian() {
        let (n, d) = (81, 0.01);
        let sigma: f64 = 0.08;
        let c = 0.4;
        let mut powers = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let r2 = (ix as f64 * d - c).powi(2) + (iy as f64 * d - c).powi(2);
                powers[iy * n + ix] = (-r2 / (2.0 * sigma * sigma)).exp();
            }
        }
        // 10 log10(exp(-r²/2σ²)) = -1  ⇒  r = σ sqrt(0.2 ln 10).
        let radius = sigma * (0.2 * 10f64.ln()).sqrt();
        let r = resolution_measure(&lattice_map(n, n, d, &powers)).unwrap();
        assert!((r.literal - radius).abs() <= d * 2f64.sqrt());
        assert!(r.literal <= radius + 1e-12);
    }

    #[test]
    fn snr_examples() {
        // Main lobe at the centre and a separated secondary peak at −5 dB.
        let mut p = vec![1e-3; 49];
        p[24] = 1.0;
        p[25] = 0.5;
        p[6] = 10f64.powf(-0.5);
        let snr = snr_measure(&lattice_map(7, 7, 1.0, &p)).unwrap();
        assert!(!snr.no_sidelobe);
        assert_relative_eq!(snr.value_db, 5.0, max_relative = 1e-12);

        let n = 11;
        let radial: Vec<f64> = (0..n * n)
            .map(|k| {
                let (x, y) = ((k % n) as f64 - 5.0, (k / n) as f64 - 5.0);
                (-(x * x + y * y) / 10.0).exp()
            })
            .collect();
        let snr = snr_measure(&lattice_map(n, n, 1.0, &radial)).unwrap();
        assert!(snr.no_sidelobe);
        assert_relative_eq!(snr.value_db, -10.0 * (-5.0f64).exp().log10(), max_relative = 1e-12);
    }

    #[test]
    fn snr_matches_flood_fill_oracle_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (nx, ny) = (rng.random_range(2..12), rng.random_range(2..12));
            let powers: Vec<f64> = (0..nx * ny)
                .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0..20) as f64 / 4.0 })
                .collect();
            if powers.iter().all(|&p| p == 0.0) {
                continue;
            }
            let map = lattice_map(nx, ny, 0.1, &powers);
            assert_eq!(snr_measure(&map).unwrap(), snr_oracle(&map));
            assert_eq!(resolution_measure(&map).unwrap(), resolution_oracle(&map));
        }
    }

    #[test]
    fn spr_examples() {
        assert_relative_eq!(spr_measure(&lattice_map(3, 3, 1.0, &[2.0; 9])).unwrap(), 0.0, epsilon = 1e-12);
        let mut delta = vec![0.0; 1681];
        delta[800] = 3.0;
        let spr = spr_measure(&lattice_map(41, 41, 0.025, &delta)).unwrap();
        assert_relative_eq!(spr, 10.0 * 1681f64.log10(), max_relative = 1e-12);
        assert!((spr - 32.26).abs() < 0.01);
        assert!(spr_measure(&lattice_map(2, 2, 1.0, &[0.0; 4])).is_err());
    }

    fn blocks_from(per_block: Vec<Vec<Complex64>>) -> BlockSamples {
        let vecs: Vec<CVec> = per_block.into_iter().map(CVec::from_vec).collect();
        BlockSamples::from_frequency_blocks(vec![1.0], &[vecs]).unwrap()
    }

    #[test]
    fn zero_mean_examples() {
        let p = vec![Complex64::new(1.0, 2.0), Complex64::new(-0.5, 0.0)];
        let same = blocks_from(vec![p.clone(), p.clone(), p.clone()]);
        assert_relative_eq!(zero_mean_deviation(&same, 0).unwrap(), 1.0, max_relative = 1e-14);
        let neg: Vec<Complex64> = p.iter().map(|z| -z).collect();
        assert_eq!(zero_mean_deviation(&blocks_from(vec![p, neg]), 0).unwrap(), 0.0);
        let zero = blocks_from(vec![vec![Complex64::new(0.0, 0.0); 2]; 2]);
        assert!(matches!(zero_mean_deviation(&zero, 0), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ad_statistic_reference_value() {
        // scipy.stats.anderson on these ten values reports A² = 0.2545998440735673.
        let x = [0.61, -1.2, 0.33, 1.74, -0.51, 0.12, -0.95, 2.1, -0.07, 0.44];
        let n = x.len() as f64;
        let a_star = ad_statistic(&x).unwrap();
        let a2 = a_star / (1.0 + 0.75 / n + 2.25 / (n * n));
        // Independent evaluation with the normal CDF from statrs.
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mut z: Vec<f64> = x.iter().map(|v| (v - mean) / sd).collect();
        z.sort_by(f64::total_cmp);
        let k = z.len();
        let s: f64 = (0..k)
            .map(|i| (2 * i + 1) as f64 * (normal.cdf(z[i]).ln() + (1.0 - normal.cdf(z[k - 1 - i])).ln()))
            .sum();
        assert_relative_eq!(a2, -n - s / n, max_relative = 1e-12);
        assert_relative_eq!(a2, 0.2545998440735673, max_relative = 1e-10);
        assert!(ad_statistic(&[1.0; 10]).is_none());
        assert!(!ad_accepts(&[1.0; 10], 0.05).unwrap());
        assert!(ad_accepts(&x[..5], 0.05).is_err());
        assert!(ad_critical_value(0.2).is_err());
    }

    #[test]
    fn ad_rate_on_normal_and_uniform_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mics = 400;
        let normal: Vec<Vec<Complex64>> = (0..50).map(|_| standard_complex_normal_vec(&mut rng, mics).iter().copied().collect()).collect();
        let rate = anderson_darling_rate(&blocks_from(normal), 0, 0.05).unwrap();
        assert!((rate - 0.9025).abs() < 0.04, "{rate}");

        let uniform: Vec<Vec<Complex64>> = (0..1000)
            .map(|_| (0..20).map(|_| Complex64::new(rng.random::<f64>(), rng.random::<f64>())).collect())
            .collect();
        assert!(anderson_darling_rate(&blocks_from(uniform), 0, 0.05).unwrap() < 0.05);

        let constant = blocks_from(vec![vec![Complex64::new(1.0, 1.0); 3]; 10]);
        assert_eq!(anderson_darling_rate(&constant, 0, 0.05).unwrap(), 0.0);
        let short = blocks_from(vec![vec![Complex64::new(1.0, 1.0); 3]; 4]);
        assert!(matches!(anderson_darling_rate(&short, 0, 0.05), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn properness_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let real: Vec<Vec<Complex64>> = (0..20)
            .map(|_| (0..4).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect())
            .collect();
        let b = blocks_from(real);
        assert_relative_eq!(properness_ratio(&csm_at(&b, 0), &pcsm_at(&b, 0)).unwrap(), 1.0, max_relative = 1e-12);

        let proper: Vec<Vec<Complex64>> = (0..1000).map(|_| standard_complex_normal_vec(&mut rng, 64).iter().copied().collect()).collect();
        let b = blocks_from(proper);
        let r = properness_ratio(&csm_at(&b, 0), &pcsm_at(&b, 0)).unwrap();
        // White proper noise: ‖C‖_F ≈ √M and every PCSM entry has size ≈ 1/√J.
        let expected = (64.0f64 / 1000.0).sqrt();
        assert!((r / expected - 1.0).abs() < 0.15, "{r}");
        assert!(properness_ratio(&CMat::zeros(2, 2), &CMat::zeros(2, 2)).is_err());
    }

    #[test]
    fn white_noise_examples() {
        assert_eq!(white_noise_deviation(&CMat::identity(4, 4).scale(3.0)).unwrap(), 0.0);
        let mut d = CMat::zeros(2, 2);
        d[(0, 0)] = Complex64::new(2.0, 0.0);
        let value = white_noise_deviation(&d).unwrap();
        assert_relative_eq!(value, 0.5f64.sqrt(), max_relative = 1e-12);
        // Cross-check the closed-form minimizer by a scan over a.
        let scan = (1..4000)
            .map(|k| {
                let a = k as f64 * 1e-3;
                ((2.0 - a).powi(2) + a * a).sqrt() / 2.0
            })
            .fold(f64::INFINITY, f64::min);
        assert!((scan - value).abs() < 1e-6);
        assert!(white_noise_deviation(&CMat::zeros(3, 3)).is_err());
    }

    #[test]
    fn streamed_white_noise_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let blocks: Vec<Vec<Complex64>> = (0..30)
            .map(|_| standard_complex_normal_vec(&mut rng, 4).iter().map(|z| z + Complex64::new(0.3, 0.0)).collect())
            .collect();
        let b = blocks_from(blocks);
        let (c, p) = (csm_at(&b, 0), pcsm_at(&b, 0));
        let dense = gaussian_covariance_estimate(&c, &p).unwrap();
        assert_relative_eq!(
            white_noise_deviation_gaussian(&c, &p).unwrap(),
            white_noise_deviation(&dense).unwrap(),
            max_relative = 1e-10
        );
    }

    proptest! {
        #[test]
        fn map_metrics_are_scale_invariant(seed in 0u64..100, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let powers: Vec<f64> = (0..36).map(|_| rng.random_range(0.0..1.0)).collect();
            let scaled: Vec<f64> = powers.iter().map(|p| p * scale).collect();
            let a = map_metrics(&lattice_map(6, 6, 0.1, &powers)).unwrap();
            let b = map_metrics(&lattice_map(6, 6, 0.1, &scaled)).unwrap();
            prop_assert!((a.spr - b.spr).abs() < 1e-9);
            prop_assert!((a.snr.value_db - b.snr.value_db).abs() < 1e-9);
            prop_assert_eq!(a.snr.no_sidelobe, b.snr.no_sidelobe);
            prop_assert!((a.resolution.literal - b.resolution.literal).abs() < 1e-12);
            prop_assert!(a.spr >= 0.0);
        }

        #[test]
        fn white_noise_deviation_is_bounded(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = CMat::from_fn(5, 5, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let h = &a + a.adjoint();
            let v = white_noise_deviation(&h).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn ad_rate_is_permutation_invariant(seed in 0u64..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows: Vec<Vec<Complex64>> = (0..12).map(|_| standard_complex_normal_vec(&mut rng, 6).iter().copied().collect()).collect();
            let base = anderson_darling_rate(&blocks_from(rows.clone()), 0, 0.05).unwrap();
            rows.reverse();
            for r in rows.iter_mut() {
                r.rotate_left(2);
            }
            prop_assert_eq!(anderson_darling_rate(&blocks_from(rows), 0, 0.05).unwrap(), base);
        }
    }
}
