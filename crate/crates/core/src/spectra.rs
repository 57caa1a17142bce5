//! Frequency-domain block samples and their cross-spectral averages.

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::linalg::{CMat, CVec};

/// Complex pressure samples indexed by (block, microphone, frequency bin).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSamples {
    /// Angular frequencies in rad/s, strictly increasing.
    freqs: Vec<f64>,
    mics: usize,
    blocks: usize,
    /// Block-major, then microphone, then frequency.
    data: Vec<Complex64>,
}

impl BlockSamples {
    pub fn new(freqs: Vec<f64>, mics: usize, blocks: usize, data: Vec<Complex64>) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        if mics == 0 || freqs.is_empty() {
            return Err(Error::InvalidArgument(
                "block samples need at least one microphone and one frequency".into(),
            ));
        }
        if freqs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument(
                "frequencies must be strictly increasing".into(),
            ));
        }
        let expected = blocks * mics * freqs.len();
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(BlockSamples {
            freqs,
            mics,
            blocks,
            data,
        })
    }

    /// Assembles samples from per-frequency block matrices (`J x M` each).
    pub fn from_frequency_blocks(freqs: Vec<f64>, per_freq: &[Vec<CVec>]) -> Result<Self> {
        if per_freq.len() != freqs.len() {
            return Err(Error::DimensionMismatch {
                expected: freqs.len(),
                got: per_freq.len(),
            });
        }
        let blocks = per_freq.first().map_or(0, Vec::len);
        let mics = per_freq.first().and_then(|b| b.first()).map_or(0, |v| v.len());
        let nf = freqs.len();
        let mut data = vec![Complex64::new(0.0, 0.0); blocks * mics * nf];
        for (f, vectors) in per_freq.iter().enumerate() {
            if vectors.len() != blocks {
                return Err(Error::DimensionMismatch {
                    expected: blocks,
                    got: vectors.len(),
                });
            }
            for (j, p) in vectors.iter().enumerate() {
                if p.len() != mics {
                    return Err(Error::DimensionMismatch {
                        expected: mics,
                        got: p.len(),
                    });
                }
                for m in 0..mics {
                    data[(j * mics + m) * nf + f] = p[m];
                }
            }
        }
        BlockSamples::new(freqs, mics, blocks, data)
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn n_freqs(&self) -> usize {
        self.freqs.len()
    }

    pub fn n_mics(&self) -> usize {
        self.mics
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks
    }

    pub fn raw(&self) -> &[Complex64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, block: usize, mic: usize, freq: usize) -> Complex64 {
        self.data[(block * self.mics + mic) * self.freqs.len() + freq]
    }

    /// Pressure vector `p_j` at frequency index `freq`.
    pub fn block_vector(&self, block: usize, freq: usize) -> CVec {
        CVec::from_fn(self.mics, |m, _| self.get(block, m, freq))
    }

    pub fn block_vectors(&self, freq: usize) -> Vec<CVec> {
        (0..self.blocks).map(|j| self.block_vector(j, freq)).collect()
    }

    /// Index of the bin closest to `omega`.
    pub fn nearest_bin(&self, omega: f64) -> usize {
        self.freqs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - omega).abs().total_cmp(&(b.1 - omega).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Keeps only the listed frequency bins.
    pub fn select_bins(&self, bins: &[usize]) -> Result<BlockSamples> {
        let freqs: Vec<f64> = bins.iter().map(|&b| self.freqs[b]).collect();
        let per_freq: Vec<Vec<CVec>> = bins.iter().map(|&b| self.block_vectors(b)).collect();
        BlockSamples::from_frequency_blocks(freqs, &per_freq)
    }
}

/// Averaged cross-spectral and pseudo cross-spectral matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralData {
    pub freqs: Vec<f64>,
    pub csm: Vec<CMat>,
    pub pcsm: Vec<CMat>,
    pub block_count: usize,
}

impl SpectralData {
    pub fn n_mics(&self) -> usize {
        self.csm.first().map_or(0, |c| c.nrows())
    }
}

fn block_average(blocks: &BlockSamples, freq: usize, conjugate: bool) -> CMat {
    let m = blocks.n_mics();
    let mut acc = CMat::zeros(m, m);
    for j in 0..blocks.n_blocks() {
        let p = blocks.block_vector(j, freq);
        if conjugate {
            acc.gerc(Complex64::new(1.0, 0.0), &p, &p, Complex64::new(1.0, 0.0));
        } else {
            acc.ger(Complex64::new(1.0, 0.0), &p, &p, Complex64::new(1.0, 0.0));
        }
    }
    acc.unscale_mut(blocks.n_blocks() as f64);
    acc
}

/// CSM `(1/J) Σ_j p_j p_j^*` at one frequency index.
pub fn csm_at(blocks: &BlockSamples, freq: usize) -> CMat {
    block_average(blocks, freq, true)
}

/// Pseudo-CSM `(1/J) Σ_j p_j p_jᵀ` at one frequency index.
pub fn pcsm_at(blocks: &BlockSamples, freq: usize) -> CMat {
    block_average(blocks, freq, false)
}

pub fn estimate_csm(blocks: &BlockSamples) -> Result<Vec<CMat>> {
    if blocks.n_blocks() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok((0..blocks.n_freqs())
        .into_par_iter()
        .map(|f| csm_at(blocks, f))
        .collect())
}

pub fn estimate_pcsm(blocks: &BlockSamples) -> Result<Vec<CMat>> {
    if blocks.n_blocks() == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok((0..blocks.n_freqs())
        .into_par_iter()
        .map(|f| pcsm_at(blocks, f))
        .collect())
}

pub fn estimate_spectral(blocks: &BlockSamples) -> Result<SpectralData> {
    Ok(SpectralData {
        freqs: blocks.freqs().to_vec(),
        csm: estimate_csm(blocks)?,
        pcsm: estimate_pcsm(blocks)?,
        block_count: blocks.n_blocks(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    /// Periodic Hann taper.
    Hann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchConfig {
    pub block_len: usize,
    pub overlap: f64,
    pub window: Window,
    /// Optional inclusive band limits in Hz for the retained bins.
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
}

impl Default for WelchConfig {
    fn default() -> Self {
        WelchConfig {
            block_len: 1024,
            overlap: 0.5,
            window: Window::Hann,
            f_min: None,
            f_max: None,
        }
    }
}

impl WelchConfig {
    pub fn hop(&self) -> usize {
        ((self.block_len as f64 * (1.0 - self.overlap)).round() as usize).max(1)
    }

    pub fn block_count(&self, samples: usize) -> usize {
        if samples < self.block_len {
            0
        } else {
            (samples - self.block_len) / self.hop() + 1
        }
    }
}

/// Splits per-microphone time series into windowed, overlapping blocks and
/// Fourier-transforms each one. The one-sided scaling makes block auto-power
/// averages estimate PSD times bin width, so `Σ_bins |p|²` recovers the
/// mean-square signal power.
pub fn welch_blocks(signals: &[Vec<f64>], sample_rate: f64, config: &WelchConfig) -> Result<BlockSamples> {
    if signals.is_empty() {
        return Err(Error::InvalidArgument("no signals given".into()));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidArgument("sample rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.overlap) {
        return Err(Error::InvalidArgument(format!(
            "overlap must lie in [0, 1), got {}",
            config.overlap
        )));
    }
    let n = config.block_len;
    let samples = signals[0].len();
    if signals.iter().any(|s| s.len() != samples) {
        return Err(Error::InvalidArgument(
            "all signals must have the same length".into(),
        ));
    }
    if n == 0 || n > samples {
        return Err(Error::InvalidArgument(format!(
            "block length {n} exceeds signal length {samples}"
        )));
    }

    let window = config.window.coefficients(n);
    let power_norm: f64 = window.iter().map(|w| w * w).sum::<f64>() * n as f64;
    let hop = config.hop();
    let blocks = config.block_count(samples);
    let df = sample_rate / n as f64;

    let bins: Vec<usize> = (0..=n / 2)
        .filter(|&k| {
            let f = k as f64 * df;
            config.f_min.is_none_or(|lo| f >= lo) && config.f_max.is_none_or(|hi| f <= hi)
        })
        .collect();
    if bins.is_empty() {
        return Err(Error::InvalidArgument("no FFT bins inside the requested band".into()));
    }
    let scale: Vec<f64> = bins
        .iter()
        .map(|&k| {
            let one_sided = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
            (one_sided / power_norm).sqrt()
        })
        .collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mics = signals.len();
    let nf = bins.len();
    let mut data = vec![Complex64::new(0.0, 0.0); blocks * mics * nf];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..blocks {
        let start = j * hop;
        for (m, signal) in signals.iter().enumerate() {
            for (slot, (x, w)) in buf.iter_mut().zip(signal[start..start + n].iter().zip(&window)) {
                *slot = Complex64::new(x * w, 0.0);
            }
            fft.process(&mut buf);
            for (f, (&k, s)) in bins.iter().zip(&scale).enumerate() {
                data[(j * mics + m) * nf + f] = buf[k] * *s;
            }
        }
    }
    let freqs = bins.iter().map(|&k| 2.0 * PI * k as f64 * df).collect();
    BlockSamples::new(freqs, mics, blocks, data)
}
