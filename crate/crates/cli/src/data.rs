use std::f64::consts::PI;
use std::path::Path;

use aeroweight::beamforming::{band_average, band_edges, beamform_map, rms_noise_level, SourceMap};
use aeroweight::covariance::{sample_covariance, CovarianceEstimate, CovarianceMethod};
use aeroweight::damas::{assemble_system, discrepancy_alpha_with, DiscrepancySettings, NnlsProblem, NnlsSolution};
use aeroweight::io::{load_blocks, load_covariance, load_matrices};
use aeroweight::linalg::CMat;
use aeroweight::spectra::{csm_at, pcsm_at, BlockSamples};
use aeroweight::{build_weighting, Error, FlowField, FocusGrid, MicArray, SelectionMask, WeightingChoice, WeightingScheme};
use anyhow::{Context, Result};
use clap::ValueEnum;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::DamasConfig;
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingName {
    Conventional,
    Ivd,
    Ivf,
    IvfLowrank,
    Shading,
    Rab,
    Capon,
}

impl WeightingName {
    pub fn parse(s: &str) -> Result<Self> {
        WeightingName::from_str(s, true).map_err(|_| UsageError(format!("unknown weighting {s:?}")).into())
    }

    pub fn label(self) -> &'static str {
        match self {
            WeightingName::Conventional => "conventional",
            WeightingName::Ivd => "ivd",
            WeightingName::Ivf => "ivf",
            WeightingName::IvfLowrank => "ivf-lowrank",
            WeightingName::Shading => "shading",
            WeightingName::Rab => "rab",
            WeightingName::Capon => "capon",
        }
    }

    pub fn needs_covariance(self) -> bool {
        matches!(self, WeightingName::Ivd | WeightingName::Ivf | WeightingName::IvfLowrank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskName {
    None,
    DiagonalRemoval,
}

impl MaskName {
    pub fn parse(s: &str) -> Result<Self> {
        MaskName::from_str(s, true).map_err(|_| UsageError(format!("unknown mask {s:?}")).into())
    }

    pub fn build(self, mics: usize) -> SelectionMask {
        match self {
            MaskName::None => SelectionMask::none(mics),
            MaskName::DiagonalRemoval => SelectionMask::diagonal_removal(mics),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovName {
    Gaussian,
    Sample,
}

impl CovName {
    pub fn parse(s: &str) -> Result<Self> {
        CovName::from_str(s, true).map_err(|_| UsageError(format!("unknown covariance method {s:?}")).into())
    }
}

/// Per-frequency inputs of the imaging stages.
pub enum Spectra {
    Blocks {
        blocks: BlockSamples,
        method: CovName,
        repair: Option<f64>,
    },
    Matrices {
        freqs: Vec<f64>,
        csm: Vec<CMat>,
        cov: Option<(Vec<f64>, CovarianceMethod, Vec<CMat>)>,
    },
}

pub struct BinData {
    pub omega: f64,
    pub csm: CMat,
    pub sigma: Option<CovarianceEstimate>,
}

impl Spectra {
    pub fn from_blocks(path: &Path, method: CovName, repair: Option<f64>) -> Result<Self> {
        let blocks = load_blocks(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Spectra::Blocks { blocks, method, repair })
    }

    pub fn from_files(csm: &Path, cov: Option<&Path>) -> Result<Self> {
        let (freqs, csm) = load_matrices(csm).with_context(|| format!("reading {}", csm.display()))?;
        let cov = cov
            .map(|p| load_covariance(p).with_context(|| format!("reading {}", p.display())))
            .transpose()?;
        Ok(Spectra::Matrices { freqs, csm, cov })
    }

    pub fn freqs(&self) -> &[f64] {
        match self {
            Spectra::Blocks { blocks, .. } => blocks.freqs(),
            Spectra::Matrices { freqs, .. } => freqs,
        }
    }

    pub fn mics(&self) -> usize {
        match self {
            Spectra::Blocks { blocks, .. } => blocks.n_mics(),
            Spectra::Matrices { csm, .. } => csm.first().map_or(0, |c| c.nrows()),
        }
    }

    pub fn block_count(&self) -> Option<usize> {
        match self {
            Spectra::Blocks { blocks, .. } => Some(blocks.n_blocks()),
            Spectra::Matrices { .. } => None,
        }
    }

    /// CSM and (optionally) covariance at bin `f`; the covariance is reduced
    /// with `mask` when it lives on the full data space.
    pub fn bin(&self, f: usize, mask: &SelectionMask, with_sigma: bool) -> Result<BinData> {
        let omega = self.freqs()[f];
        let (csm, sigma) = match self {
            Spectra::Blocks { blocks, method, repair } => {
                let csm = csm_at(blocks, f);
                let sigma = if with_sigma {
                    let est = match method {
                        CovName::Gaussian => CovarianceEstimate::gaussian(&csm, &pcsm_at(blocks, f), blocks.n_blocks())?,
                        CovName::Sample => sample_covariance(blocks, f)?,
                    };
                    Some(match repair {
                        Some(alpha) => est.repaired(*alpha)?,
                        None => est,
                    })
                } else {
                    None
                };
                (csm, sigma)
            }
            Spectra::Matrices { csm, cov, .. } => {
                let sigma = match (with_sigma, cov) {
                    (true, Some((freqs, method, sigmas))) => {
                        let k = freqs
                            .iter()
                            .position(|&w| (w - omega).abs() <= 1e-9 * omega.abs().max(1.0))
                            .ok_or_else(|| {
                                Error::InconsistentInputs(format!(
                                    "covariance file has no entry for {:.4} Hz",
                                    omega / (2.0 * PI)
                                ))
                            })?;
                        Some(CovarianceEstimate::from_per_block(sigmas[k].clone(), *method, 1)?)
                    }
                    _ => None,
                };
                (csm[f].clone(), sigma)
            }
        };
        let sigma = match sigma {
            Some(s) if s.dim() == mask.full_dim() && !mask.is_identity() => Some(s.reduce(mask)?),
            other => other,
        };
        Ok(BinData { omega, csm, sigma })
    }
}

#[derive(Debug, Clone, Default)]
pub struct WeightOptions {
    pub rab_alpha: Option<f64>,
    pub lowrank_mass: f64,
    pub shading: Option<DVector<f64>>,
}

pub fn read_shading(path: &Path) -> Result<DVector<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad shading value {s:?}"))))
        .collect::<Result<Vec<f64>, Error>>()?;
    Ok(DVector::from_vec(values))
}

/// Builds the weighting `name` on the mask's reduced data space.
pub fn weighting(name: WeightingName, bin: &BinData, mask: &SelectionMask, opts: &WeightOptions) -> Result<WeightingScheme> {
    let mics = bin.csm.nrows();
    let sigma = || {
        bin.sigma
            .as_ref()
            .ok_or_else(|| UsageError(format!("weighting {} needs a covariance estimate", name.label())))
    };
    let full = match name {
        WeightingName::Conventional => build_weighting(WeightingChoice::Conventional { mics, sigma2: 1.0 })?,
        WeightingName::Ivd => return Ok(build_weighting(WeightingChoice::InverseVarianceDiagonal(sigma()?))?),
        WeightingName::Ivf => return Ok(build_weighting(WeightingChoice::InverseVarianceFull(sigma()?))?),
        WeightingName::IvfLowrank => {
            return Ok(build_weighting(WeightingChoice::InverseVarianceLowRank(sigma()?, opts.lowrank_mass))?)
        }
        WeightingName::Shading => {
            let nu = opts
                .shading
                .as_ref()
                .ok_or_else(|| UsageError("shading weighting needs --shading FILE".into()))?;
            build_weighting(WeightingChoice::Shading(nu))?
        }
        WeightingName::Rab => {
            let alpha = opts.rab_alpha.unwrap_or(0.1 * bin.csm.trace().re / mics as f64);
            build_weighting(WeightingChoice::RobustAdaptive { csm: &bin.csm, alpha })?
        }
        WeightingName::Capon => build_weighting(WeightingChoice::Capon { csm: &bin.csm })?,
    };
    Ok(full.reduce(mask)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Bin(f64),
    Band(f64),
}

impl Target {
    pub fn hz(self) -> f64 {
        match self {
            Target::Bin(f) | Target::Band(f) => f,
        }
    }

    pub fn label(self) -> String {
        match self {
            Target::Bin(f) => format!("{f:.0}hz"),
            Target::Band(f) => format!("band{f:.0}hz"),
        }
    }

    /// Bin indices contributing to the target and the one closest to its center.
    pub fn bins(self, freqs: &[f64]) -> Result<(Vec<usize>, usize)> {
        let center = 2.0 * PI * self.hz();
        let nearest = |cands: &[usize]| {
            *cands
                .iter()
                .min_by(|&&a, &&b| (freqs[a] - center).abs().total_cmp(&(freqs[b] - center).abs()))
                .expect("non-empty candidate list")
        };
        let all: Vec<usize> = (0..freqs.len()).collect();
        match self {
            Target::Bin(_) => {
                let k = nearest(&all);
                Ok((vec![k], k))
            }
            Target::Band(_) => {
                let (lower, upper) = band_edges(center);
                let tol = 1e-12 * upper;
                let inside: Vec<usize> = all
                    .iter()
                    .copied()
                    .filter(|&k| freqs[k] >= lower - tol && freqs[k] <= upper + tol)
                    .collect();
                if inside.is_empty() {
                    let mut by_distance = all.clone();
                    by_distance.sort_by(|&a, &b| (freqs[a] - center).abs().total_cmp(&(freqs[b] - center).abs()));
                    return Err(Error::NoBinsInBand {
                        lower,
                        upper,
                        nearest: by_distance.iter().take(2).map(|&k| freqs[k]).collect(),
                    }
                    .into());
                }
                let k = nearest(&inside);
                Ok((inside, k))
            }
        }
    }
}

/// One source map together with what DAMAS needs to deconvolve it.
pub struct Imaged {
    pub name: WeightingName,
    pub target: Target,
    pub map: SourceMap,
    pub center_weighting: WeightingScheme,
    pub center_omega: f64,
    pub delta: Option<f64>,
}

pub struct Scene<'a> {
    pub array: &'a MicArray,
    pub flow: &'a FlowField,
    pub grid: &'a FocusGrid,
    pub mask: &'a SelectionMask,
}

/// Beamforms every weighting at every bin of `target`; band targets are
/// averaged. `δ_rms` of the averaged map is `sqrt(Σ_k δ_k²) / K`.
pub fn image(
    spectra: &Spectra,
    scene: &Scene,
    names: &[WeightingName],
    target: Target,
    opts: &WeightOptions,
    want_delta: bool,
) -> Result<Vec<Imaged>> {
    let freqs = spectra.freqs().to_vec();
    let (bins, center_bin) = target.bins(&freqs)?;
    let with_sigma = want_delta || names.iter().any(|n| n.needs_covariance());
    let mut maps: Vec<Vec<SourceMap>> = vec![Vec::new(); names.len()];
    let mut delta_sq = vec![0.0; names.len()];
    let mut centers: Vec<Option<WeightingScheme>> = vec![None; names.len()];
    for &k in &bins {
        let bin = spectra.bin(k, scene.mask, with_sigma)?;
        for (i, &name) in names.iter().enumerate() {
            let w = weighting(name, &bin, scene.mask, opts)?;
            let map = beamform_map(&bin.csm, &w, scene.mask, scene.grid, scene.array, bin.omega, scene.flow)?;
            maps[i].push(map);
            if want_delta {
                let sigma = bin
                    .sigma
                    .as_ref()
                    .ok_or_else(|| UsageError("noise level δ_rms needs a covariance estimate".into()))?;
                let d = rms_noise_level(&w, sigma, scene.mask, scene.grid, scene.array, bin.omega, scene.flow)?;
                delta_sq[i] += d * d;
            }
            if k == center_bin {
                centers[i] = Some(w);
            }
        }
    }
    let count = bins.len() as f64;
    names
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut map = match target {
                Target::Bin(_) => maps[i].pop().expect("one map per bin"),
                Target::Band(f) => band_average(&maps[i], 2.0 * PI * f)?,
            };
            map.block_count = spectra.block_count();
            Ok(Imaged {
                name,
                target,
                map,
                center_weighting: centers[i].take().expect("center bin imaged"),
                center_omega: match target {
                    Target::Bin(_) => freqs[center_bin],
                    Target::Band(f) => 2.0 * PI * f,
                },
                delta: want_delta.then(|| delta_sq[i].sqrt() / count),
            })
        })
        .collect()
}

pub struct Deconvolved {
    pub solution: NnlsSolution,
    pub flag: Option<&'static str>,
}

pub fn deconvolve(imaged: &Imaged, scene: &Scene, cfg: &DamasConfig) -> Result<Deconvolved> {
    let system = assemble_system(
        &imaged.center_weighting,
        scene.mask,
        scene.grid,
        &imaged.map,
        scene.array,
        imaged.center_omega,
        scene.flow,
    )?;
    let problem = NnlsProblem::new(system.h, system.b)?;
    if let Some(alpha) = cfg.alpha {
        return Ok(Deconvolved {
            solution: problem.solve(alpha)?,
            flag: None,
        });
    }
    let delta = imaged
        .delta
        .ok_or_else(|| UsageError("discrepancy principle needs a covariance estimate (or give a fixed alpha)".into()))?;
    let settings = DiscrepancySettings {
        tau: cfg.tau,
        bracket: (cfg.bracket[0], cfg.bracket[1]),
        ..DiscrepancySettings::default()
    };
    let choice = discrepancy_alpha_with(&problem, delta, &settings)?;
    Ok(Deconvolved {
        flag: Some(choice.flag.name()),
        solution: choice.solution,
    })
}
