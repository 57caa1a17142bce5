use std::f64::consts::PI;
use std::path::Path;

use aeroweight::synth::{noise_amplitude_for_level, SynthScenario};
use aeroweight::{build_focus_grid, FlowField, FocusGrid, MicArray, Point3};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ArraySpec {
    Spiral { mics: usize, aperture: f64 },
    /// Text file with one `x y z` line per microphone.
    File(String),
}

impl ArraySpec {
    /// Parses `spiral:M:APERTURE` or a file path.
    pub fn from_arg(arg: &str) -> Result<Self> {
        if let Some(rest) = arg.strip_prefix("spiral:") {
            let (m, a) = rest
                .split_once(':')
                .ok_or_else(|| UsageError(format!("expected spiral:MICS:APERTURE, got {arg:?}")))?;
            Ok(ArraySpec::Spiral {
                mics: m.parse().map_err(|_| UsageError(format!("bad microphone count {m:?}")))?,
                aperture: a.parse().map_err(|_| UsageError(format!("bad aperture {a:?}")))?,
            })
        } else {
            Ok(ArraySpec::File(arg.to_string()))
        }
    }

    pub fn load(&self, workdir: &Path) -> Result<MicArray> {
        match self {
            ArraySpec::Spiral { mics, aperture } => Ok(MicArray::spiral(*mics, *aperture)?),
            ArraySpec::File(path) => {
                let path = workdir.join(path);
                MicArray::from_file(&path).with_context(|| format!("reading array {}", path.display()))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrequencySpec {
    List(Vec<f64>),
    Range { start: f64, stop: f64, step: f64 },
}

impl FrequencySpec {
    pub fn hz(&self) -> Result<Vec<f64>> {
        match self {
            FrequencySpec::List(v) => Ok(v.clone()),
            FrequencySpec::Range { start, stop, step } => {
                if !(*step > 0.0) || stop < start {
                    return Err(UsageError(format!("invalid frequency range {start}..{stop} step {step}")).into());
                }
                let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
                Ok((0..count).map(|k| start + k as f64 * step).collect())
            }
        }
    }
}

fn default_source() -> [f64; 3] {
    [0.0, 0.0, 0.75]
}
fn default_one() -> f64 {
    1.0
}
fn default_noise_db() -> f64 {
    20.0
}
fn default_blocks() -> usize {
    1000
}
fn default_speed() -> f64 {
    343.0
}

/// Synthetic monopole scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub array: ArraySpec,
    #[serde(default = "default_source")]
    pub source: [f64; 3],
    #[serde(default = "default_one")]
    pub source_amplitude: f64,
    /// `20 log10(p0 / ρ)`.
    #[serde(default = "default_noise_db")]
    pub noise_db: f64,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    pub frequencies_hz: FrequencySpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
    #[serde(default)]
    pub mach: [f64; 3],
}

impl ScenarioConfig {
    pub fn flow(&self) -> Result<FlowField> {
        Ok(FlowField::new(self.speed_of_sound, Point3::from(self.mach))?)
    }

    pub fn to_scenario(&self, workdir: &Path) -> Result<SynthScenario> {
        Ok(SynthScenario {
            source_position: Point3::from(self.source),
            source_amplitude: self.source_amplitude,
            noise_amplitude: noise_amplitude_for_level(self.source_amplitude, self.noise_db),
            block_count: self.blocks,
            frequencies: self.frequencies_hz.hz()?.iter().map(|f| 2.0 * PI * f).collect(),
            seed: self.seed,
            array: self.array.load(workdir)?,
            flow: self.flow()?,
        })
    }
}

/// Rectangular focus plane at height `z`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: f64,
    pub step: f64,
}

impl GridSpec {
    /// Parses `xmin,xmax,ymin,ymax,z,step`.
    pub fn from_arg(arg: &str) -> Result<Self> {
        let v: Vec<f64> = arg
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| UsageError(format!("cannot parse grid {arg:?}")))?;
        let [x0, x1, y0, y1, z, step] = v[..] else {
            return Err(UsageError(format!("grid needs 6 values xmin,xmax,ymin,ymax,z,step, got {}", v.len())).into());
        };
        Ok(GridSpec {
            x: [x0, x1],
            y: [y0, y1],
            z,
            step,
        })
    }

    pub fn build(&self) -> Result<FocusGrid> {
        if !(self.step > 0.0) || self.x[1] < self.x[0] || self.y[1] < self.y[0] {
            return Err(UsageError(format!("invalid grid {self:?}")).into());
        }
        let count = |lo: f64, hi: f64| ((hi - lo) / self.step + 1e-9).floor() as usize + 1;
        Ok(build_focus_grid(
            Point3::new(self.x[0], self.y[0], self.z),
            self.step,
            self.step,
            count(self.x[0], self.x[1]),
            count(self.y[0], self.y[1]),
        )?)
    }
}

fn default_tau() -> f64 {
    1.5
}
fn default_bracket() -> [f64; 2] {
    [1e-8, 1e8]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamasConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Bracket for the discrepancy search in units of `‖H‖_F² / N`.
    #[serde(default = "default_bracket")]
    pub bracket: [f64; 2],
    /// Fixed regularization; skips the discrepancy search.
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Default for DamasConfig {
    fn default() -> Self {
        DamasConfig {
            tau: default_tau(),
            bracket: default_bracket(),
            alpha: None,
        }
    }
}

/// Recorded measurement data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub blocks: String,
    pub array: ArraySpec,
    #[serde(default = "default_speed")]
    pub speed_of_sound: f64,
    #[serde(default)]
    pub mach: [f64; 3],
}

fn default_weightings() -> Vec<String> {
    ["conventional", "ivd", "ivf"].map(String::from).to_vec()
}
fn default_mask() -> String {
    "diagonal-removal".into()
}
fn default_covariance() -> String {
    "gaussian".into()
}
fn default_significance() -> f64 {
    0.05
}
fn default_output() -> String {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub scenario: Option<ScenarioConfig>,
    #[serde(default)]
    pub input: Option<InputConfig>,
    #[serde(default = "default_weightings")]
    pub weightings: Vec<String>,
    #[serde(default = "default_mask")]
    pub mask: String,
    pub grid: GridSpec,
    pub bands_hz: Vec<f64>,
    #[serde(default = "default_covariance")]
    pub covariance: String,
    #[serde(default)]
    pub damas: Option<DamasConfig>,
    #[serde(default = "default_significance")]
    pub significance: f64,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

impl RunConfig {
    pub fn validate(&self, workdir: &Path) -> Result<()> {
        match (&self.scenario, &self.input) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(UsageError("config needs exactly one of \"scenario\" and \"input\"".into()).into())
            }
            (None, Some(input)) => {
                let path = workdir.join(&input.blocks);
                if !path.is_file() {
                    return Err(UsageError(format!("input file {} does not exist", path.display())).into());
                }
                if let ArraySpec::File(f) = &input.array {
                    if !workdir.join(f).is_file() {
                        return Err(UsageError(format!("array file {f} does not exist")).into());
                    }
                }
            }
            (Some(_), None) => {}
        }
        if self.bands_hz.is_empty() {
            return Err(UsageError("bands_hz must not be empty".into()).into());
        }
        if self.weightings.is_empty() {
            return Err(UsageError("at least one weighting is required".into()).into());
        }
        Ok(())
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())).into())
}
