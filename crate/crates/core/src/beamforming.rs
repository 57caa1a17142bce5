//! The W-weighted beamformer and its variance.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::covariance::CovarianceEstimate;
use crate::error::{Error, Result};
use crate::geometry::{propagation_vector, FlowField, FocusGrid, MicArray};
use crate::linalg::{inner, CMat, CVec};
use crate::weighting::{SelectionMask, WeightingScheme};

/// Lower and upper third-octave factor `2^(±1/6)`.
pub const THIRD_OCTAVE_HALF_WIDTH: f64 = 1.122_462_048_309_373;

/// Frequency content of a source map.
#[derive(Debug, Clone, PartialEq)]
pub enum BandDescriptor {
    /// A single frequency bin (rad/s).
    Bin { omega: f64 },
    /// Third-octave band around `center` averaging the listed bins (rad/s).
    ThirdOctave { center: f64, bins: Vec<f64> },
}

impl BandDescriptor {
    pub fn center(&self) -> f64 {
        match self {
            BandDescriptor::Bin { omega } => *omega,
            BandDescriptor::ThirdOctave { center, .. } => *center,
        }
    }

    pub fn describe(&self) -> String {
        let hz = |w: f64| w / (2.0 * std::f64::consts::PI);
        match self {
            BandDescriptor::Bin { omega } => format!("bin {:.4} Hz", hz(*omega)),
            BandDescriptor::ThirdOctave { center, bins } => format!(
                "third-octave {:.4} Hz ({} bins)",
                hz(*center),
                bins.len()
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceMap {
    pub grid: FocusGrid,
    pub band: BandDescriptor,
    pub values: Vec<Complex64>,
    pub powers: Vec<f64>,
    pub weighting: String,
    pub mask: String,
    pub block_count: Option<usize>,
}

impl SourceMap {
    pub fn new(
        grid: FocusGrid,
        band: BandDescriptor,
        values: Vec<Complex64>,
        weighting: String,
        mask: String,
    ) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        let powers = values.iter().map(|v| v.re.max(0.0)).collect();
        Ok(SourceMap {
            grid,
            band,
            values,
            powers,
            weighting,
            mask,
            block_count: None,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index and power of the global maximum (first one on ties).
    pub fn peak(&self) -> (usize, f64) {
        self.powers
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
    }

    pub fn powers_db(&self) -> Vec<f64> {
        to_db(&self.powers)
    }

    pub fn scaled(&self, factor: f64) -> Result<SourceMap> {
        let mut out = SourceMap::new(
            self.grid.clone(),
            self.band.clone(),
            self.values.iter().map(|v| v * factor).collect(),
            self.weighting.clone(),
            self.mask.clone(),
        )?;
        out.block_count = self.block_count;
        Ok(out)
    }
}

/// `10 log10(p / max p)`; zero powers map to `-inf`.
pub fn to_db(powers: &[f64]) -> Vec<f64> {
    let max = powers.iter().copied().fold(0.0, f64::max);
    powers
        .iter()
        .map(|&p| {
            if max > 0.0 && p > 0.0 {
                10.0 * (p / max).log10()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect()
}

fn check_weighting(w: &WeightingScheme, mask: &SelectionMask) -> Result<()> {
    if w.dim() != mask.len() {
        return Err(Error::InconsistentInputs(format!(
            "weighting has dimension {} but mask '{}' retains {} entries",
            w.dim(),
            mask.label(),
            mask.len()
        )));
    }
    Ok(())
}

/// `W⁻¹ ḡ` and `<ḡ, W⁻¹ ḡ>` for the reduced `ḡ = vec(g gᴴ)`.
pub(crate) struct WeightedSteering {
    pub u: CVec,
    pub denominator: f64,
}

pub(crate) fn weighted_steering(
    w: &WeightingScheme,
    mask: &SelectionMask,
    g: &CVec,
) -> Result<WeightedSteering> {
    let gbar = mask.reduce_rank_one(g)?;
    if gbar.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
        return Err(Error::DegenerateSteering);
    }
    let u = w.apply_inverse(&gbar)?;
    let denominator = inner(&gbar, &u).re;
    if !denominator.is_finite() {
        return Err(Error::NonFinite("beamformer denominator".into()));
    }
    if denominator <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            what: "weighting (non-positive <g, W⁻¹g>)".into(),
            eigenvalue: denominator,
        });
    }
    Ok(WeightedSteering { u, denominator })
}

fn point_value(c_reduced: &CVec, w: &WeightingScheme, mask: &SelectionMask, g: &CVec) -> Result<Complex64> {
    let ws = weighted_steering(w, mask, g)?;
    Ok(inner(c_reduced, &ws.u) / ws.denominator)
}

/// `I_W = <vec C, ḡ>_W / <ḡ, ḡ>_W` on the retained entries; `w` must already be
/// reduced with `mask`.
pub fn beamform_point(csm: &CMat, w: &WeightingScheme, mask: &SelectionMask, g: &CVec) -> Result<Complex64> {
    check_weighting(w, mask)?;
    point_value(&mask.reduce_matrix(csm)?, w, mask, g)
}

pub fn beamform_map(
    csm: &CMat,
    w: &WeightingScheme,
    mask: &SelectionMask,
    grid: &FocusGrid,
    array: &MicArray,
    omega: f64,
    flow: &FlowField,
) -> Result<SourceMap> {
    check_weighting(w, mask)?;
    if csm.nrows() != array.len() {
        return Err(Error::DimensionMismatch {
            expected: array.len(),
            got: csm.nrows(),
        });
    }
    let c = mask.reduce_matrix(csm)?;
    let values = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(n, y)| {
            propagation_vector(array, y, omega, flow)
                .and_then(|g| point_value(&c, w, mask, &g))
                .map_err(|e| Error::at_point(n, e))
        })
        .collect::<Result<Vec<_>>>()?;
    SourceMap::new(
        grid.clone(),
        BandDescriptor::Bin { omega },
        values,
        w.descriptor(),
        mask.label().to_string(),
    )
}

fn reduced_sigma<'a>(
    sigma: &'a CovarianceEstimate,
    mask: &SelectionMask,
) -> Result<std::borrow::Cow<'a, CovarianceEstimate>> {
    if sigma.dim() == mask.len() {
        Ok(std::borrow::Cow::Borrowed(sigma))
    } else if sigma.dim() == mask.full_dim() {
        Ok(std::borrow::Cow::Owned(sigma.reduce(mask)?))
    } else {
        Err(Error::InconsistentInputs(format!(
            "covariance has dimension {}, mask acts on {} of {} entries",
            sigma.dim(),
            mask.len(),
            mask.full_dim()
        )))
    }
}

fn variance_reduced(sigma: &CMat, w: &WeightingScheme, mask: &SelectionMask, g: &CVec) -> Result<f64> {
    let ws = weighted_steering(w, mask, g)?;
    let num = inner(&(sigma * &ws.u), &ws.u).re;
    Ok(num.max(0.0) / (ws.denominator * ws.denominator))
}

/// `V_W = <W⁻¹ḡ, Σ W⁻¹ḡ> / <ḡ, W⁻¹ḡ>²` with `Σ` the covariance of the averaged
/// data. `sigma` may be given on the full or the reduced space.
pub fn beamformer_variance(
    w: &WeightingScheme,
    sigma: &CovarianceEstimate,
    mask: &SelectionMask,
    g: &CVec,
) -> Result<f64> {
    check_weighting(w, mask)?;
    let sigma = reduced_sigma(sigma, mask)?;
    variance_reduced(&sigma.sigma, w, mask, g)
}

/// `δ = sqrt(Σ_n V_W(y_n))` over the focus grid.
pub fn rms_noise_level(
    w: &WeightingScheme,
    sigma: &CovarianceEstimate,
    mask: &SelectionMask,
    grid: &FocusGrid,
    array: &MicArray,
    omega: f64,
    flow: &FlowField,
) -> Result<f64> {
    check_weighting(w, mask)?;
    let sigma = reduced_sigma(sigma, mask)?;
    let variances = grid
        .points()
        .par_iter()
        .enumerate()
        .map(|(n, y)| {
            propagation_vector(array, y, omega, flow)
                .and_then(|g| variance_reduced(&sigma.sigma, w, mask, &g))
                .map_err(|e| Error::at_point(n, e))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(variances.iter().sum::<f64>().sqrt())
}

/// Third-octave band edges `[2^(-1/6) ω0, 2^(1/6) ω0]`.
pub fn band_edges(center: f64) -> (f64, f64) {
    (center / THIRD_OCTAVE_HALF_WIDTH, center * THIRD_OCTAVE_HALF_WIDTH)
}

/// Mean of the single-bin maps whose frequency lies in the third-octave band
/// around `center`. Complex values are averaged first; powers are clamped after.
pub fn band_average(maps: &[SourceMap], center: f64) -> Result<SourceMap> {
    let (lower, upper) = band_edges(center);
    let tol = 1e-12 * upper;
    let selected: Vec<&SourceMap> = maps
        .iter()
        .filter(|m| {
            let w = m.band.center();
            w >= lower - tol && w <= upper + tol
        })
        .collect();
    let Some(first) = selected.first() else {
        let mut all: Vec<f64> = maps.iter().map(|m| m.band.center()).collect();
        all.sort_by(|a, b| (a - center).abs().total_cmp(&(b - center).abs()));
        all.truncate(2);
        return Err(Error::NoBinsInBand {
            lower,
            upper,
            nearest: all,
        });
    };
    for m in &selected[1..] {
        if m.grid != first.grid {
            return Err(Error::InconsistentInputs("maps in a band must share the focus grid".into()));
        }
        if m.weighting != first.weighting || m.mask != first.mask {
            return Err(Error::InconsistentInputs(
                "maps in a band must share weighting and mask".into(),
            ));
        }
    }
    let count = selected.len() as f64;
    let values = (0..first.len())
        .map(|n| selected.iter().map(|m| m.values[n]).sum::<Complex64>() / count)
        .collect();
    let mut out = SourceMap::new(
        first.grid.clone(),
        BandDescriptor::ThirdOctave {
            center,
            bins: selected.iter().map(|m| m.band.center()).collect(),
        },
        values,
        first.weighting.clone(),
        first.mask.clone(),
    )?;
    out.block_count = first.block_count;
    Ok(out)
}
