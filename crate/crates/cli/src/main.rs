//! `aeroweight` command-line tool.
//!
//! Frequencies on the command line and in configs are in Hz; all paths are
//! resolved against `--workdir`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod data;
mod manifest;
mod maps;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{CovName, MaskName, WeightingName};

/// Invalid invocation or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "aeroweight", version, about = "Weighted beamforming, DAMAS-NNLS and data-model diagnostics")]
struct Cli {
    /// Directory against which all relative paths are resolved.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true, env = "AEROWEIGHT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw synthetic monopole block samples.
    Synth(SynthArgs),
    /// Estimate cross-spectral matrices from block samples.
    Csm(CsmArgs),
    /// Estimate the covariance of the averaged CSM.
    Cov(CovArgs),
    /// Weighted beamforming maps.
    Beamform(ImageArgs),
    /// DAMAS-NNLS deconvolution of beamforming maps.
    Damas(DamasArgs),
    /// Resolution, SNR and SPR of source-map CSVs.
    Metrics(MetricsArgs),
    /// Checks of the statistical data model.
    Stats(StatsArgs),
    /// Full run driven by a JSON config.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Serialize)]
pub struct CsmArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the pseudo cross-spectral matrices.
    #[arg(long)]
    pub pcsm: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CovArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = CovName::Gaussian)]
    pub method: CovName,
    #[arg(long, value_enum, default_value_t = MaskName::None)]
    pub mask: MaskName,
    /// Project onto the PSD cone and add this diagonal loading.
    #[arg(long)]
    pub repair: Option<f64>,
    /// Restrict to the bins nearest these frequencies (Hz).
    #[arg(long = "freq")]
    pub freqs: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("source").required(true).args(["blocks", "csm"])))]
pub struct ImageArgs {
    /// Block samples (CSM and covariance are estimated on the fly).
    #[arg(long)]
    pub blocks: Option<PathBuf>,
    #[arg(long)]
    pub csm: Option<PathBuf>,
    /// Covariance file matching `--csm`.
    #[arg(long, requires = "csm")]
    pub cov: Option<PathBuf>,
    /// Array file or `spiral:MICS:APERTURE`.
    #[arg(long)]
    pub array: String,
    /// `xmin,xmax,ymin,ymax,z,step` in meters.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long = "weighting", value_enum, default_values_t = [WeightingName::Conventional])]
    pub weightings: Vec<WeightingName>,
    #[arg(long, value_enum, default_value_t = MaskName::None)]
    pub mask: MaskName,
    /// Single-bin maps at the bins nearest these frequencies (Hz).
    #[arg(long = "freq")]
    pub freqs: Vec<f64>,
    /// Third-octave band maps at these center frequencies (Hz).
    #[arg(long = "band")]
    pub bands: Vec<f64>,
    #[arg(long, value_enum, default_value_t = CovName::Gaussian)]
    pub covariance: CovName,
    #[arg(long)]
    pub repair: Option<f64>,
    /// Diagonal loading of the robust adaptive weighting.
    #[arg(long)]
    pub rab_alpha: Option<f64>,
    /// Frobenius mass kept by the low-rank covariance surrogate.
    #[arg(long, default_value_t = 0.99)]
    pub lowrank_mass: f64,
    /// File with one shading factor per microphone.
    #[arg(long)]
    pub shading: Option<PathBuf>,
    #[arg(long, default_value_t = 343.0)]
    pub speed_of_sound: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DamasArgs {
    #[command(flatten)]
    pub image: ImageArgs,
    #[arg(long, default_value_t = 1.5)]
    pub tau: f64,
    /// Fixed regularization instead of the discrepancy principle.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Discrepancy bracket `LO,HI` in units of ‖H‖_F²/N.
    #[arg(long, value_delimiter = ',')]
    pub bracket: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    #[arg(long = "map", required = true)]
    pub maps: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub significance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<aeroweight::Error>()) {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = commands::Ctx { workdir: cli.workdir };
    match &cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Csm(a) => commands::csm(&ctx, a),
        Command::Cov(a) => commands::cov(&ctx, a),
        Command::Beamform(a) => commands::beamform(&ctx, a),
        Command::Damas(a) => commands::damas(&ctx, a),
        Command::Metrics(a) => commands::metrics(&ctx, a),
        Command::Stats(a) => commands::stats(&ctx, a),
        Command::Pipeline(a) => commands::pipeline(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
