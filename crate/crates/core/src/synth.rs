//! Synthetic single-monopole benchmark data.
//!
//! Samples follow `p_j = η_j p0 g(y_s) + ρ ε_j`, where `η_j` is a scalar and
//! `ε_j` an M-vector of independent standard complex normal variates
//! (real and imaginary parts `N(0, 1/2)`, so `E|z|² = 1`).
//!
//! Random numbers come from ChaCha8 (`rand_chacha::ChaCha8Rng`), one stream
//! per frequency bin seeded with `seed ^ bin_index`. Standard normals use the
//! Ziggurat sampler of `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use num_complex::Complex64;

use crate::covariance::CovarianceEstimate;
use crate::error::{Error, Result};
use crate::geometry::{propagation_vector, FlowField, MicArray, Point3};
use crate::linalg::{CMat, CVec};
use crate::spectra::BlockSamples;

#[derive(Debug, Clone)]
pub struct SynthScenario {
    pub source_position: Point3,
    pub source_amplitude: f64,
    pub noise_amplitude: f64,
    pub block_count: usize,
    /// Angular frequencies in rad/s.
    pub frequencies: Vec<f64>,
    pub seed: u64,
    pub array: MicArray,
    pub flow: FlowField,
}

impl SynthScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_amplitude >= 0.0) || !(self.noise_amplitude >= 0.0) {
            return Err(Error::InvalidArgument(
                "source and noise amplitudes must be non-negative".into(),
            ));
        }
        if self.block_count == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        if self.frequencies.is_empty() {
            return Err(Error::InvalidArgument("no frequencies given".into()));
        }
        Ok(())
    }

    pub fn noise_level_db(&self) -> Result<f64> {
        noise_level_db(self.source_amplitude, self.noise_amplitude)
    }
}

/// Noise-free expectations of the synthetic data at each frequency.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub freqs: Vec<f64>,
    pub steering: Vec<CVec>,
    pub source_power: f64,
    pub noise_power: f64,
    pub block_count: usize,
}

impl GroundTruth {
    /// `p0² g gᴴ` at frequency index `f`.
    pub fn signal_csm(&self, f: usize) -> CMat {
        let g = &self.steering[f];
        (g * g.adjoint()).scale(self.source_power)
    }

    /// `ρ² I`.
    pub fn noise_csm(&self) -> CMat {
        let m = self.steering.first().map_or(0, |g| g.len());
        CMat::identity(m, m).scale(self.noise_power)
    }

    /// Expected CSM `p0² G + ρ² I`.
    pub fn expected_csm(&self, f: usize) -> CMat {
        self.signal_csm(f) + self.noise_csm()
    }

    /// Covariance of the averaged CSM for these proper Gaussian samples:
    /// `(Cᵀ ⊗ C) / J` with `C` the expected CSM.
    pub fn expected_sigma(&self, f: usize) -> Result<CovarianceEstimate> {
        let c = self.expected_csm(f);
        let zero = CMat::zeros(c.nrows(), c.ncols());
        CovarianceEstimate::gaussian(&c, &zero, self.block_count)
    }
}

/// Draws one standard complex normal variate.
pub fn standard_complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

pub fn standard_complex_normal_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> CVec {
    CVec::from_fn(len, |_, _| standard_complex_normal(rng))
}

/// RNG stream for frequency bin `index`.
pub fn frequency_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index as u64)
}

/// Draws `blocks` pressure vectors `η p0 g + ρ ε` for a single steering vector.
pub fn draw_monopole_blocks<R: Rng + ?Sized>(
    rng: &mut R,
    steering: &CVec,
    source_amplitude: f64,
    noise_amplitude: f64,
    blocks: usize,
) -> Vec<CVec> {
    (0..blocks)
        .map(|_| {
            let eta = standard_complex_normal(rng);
            let mut p = steering * (eta * source_amplitude);
            for z in p.iter_mut() {
                *z += standard_complex_normal(rng) * noise_amplitude;
            }
            p
        })
        .collect()
}

pub fn synthesize_blocks(scenario: &SynthScenario) -> Result<(BlockSamples, GroundTruth)> {
    scenario.validate()?;
    let steering = scenario
        .frequencies
        .iter()
        .map(|&omega| {
            propagation_vector(
                &scenario.array,
                &scenario.source_position,
                omega,
                &scenario.flow,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let per_freq: Vec<Vec<CVec>> = steering
        .par_iter()
        .enumerate()
        .map(|(f, g)| {
            let mut rng = frequency_rng(scenario.seed, f);
            draw_monopole_blocks(
                &mut rng,
                g,
                scenario.source_amplitude,
                scenario.noise_amplitude,
                scenario.block_count,
            )
        })
        .collect();

    let blocks = BlockSamples::from_frequency_blocks(scenario.frequencies.clone(), &per_freq)?;
    let truth = GroundTruth {
        freqs: scenario.frequencies.clone(),
        steering,
        source_power: scenario.source_amplitude.powi(2),
        noise_power: scenario.noise_amplitude.powi(2),
        block_count: scenario.block_count,
    };
    Ok((blocks, truth))
}

/// `Δ_noise = 20 log10(p0 / ρ)` in dB.
pub fn noise_level_db(source_amplitude: f64, noise_amplitude: f64) -> Result<f64> {
    if !(source_amplitude > 0.0) || !(noise_amplitude > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "amplitudes must be positive, got p0={source_amplitude}, rho={noise_amplitude}"
        )));
    }
    Ok(20.0 * (source_amplitude / noise_amplitude).log10())
}

/// Noise amplitude `ρ` that yields `level_db` for the given source amplitude.
pub fn noise_amplitude_for_level(source_amplitude: f64, level_db: f64) -> f64 {
    source_amplitude * 10f64.powf(-level_db / 20.0)
}
