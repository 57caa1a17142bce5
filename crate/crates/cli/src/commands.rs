use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use aeroweight::diagnostics::{compute_stats, map_metrics, StatsReport};
use aeroweight::io::{load_blocks, write_blocks, write_covariance, write_damas_csv, write_matrices, write_report_csv, write_source_map_csv, ReportRow};
use aeroweight::spectra::{estimate_csm, estimate_pcsm, BlockSamples};
use aeroweight::synth::synthesize_blocks;
use aeroweight::{covariance::CovarianceEstimate, covariance::sample_covariance, spectra::csm_at, spectra::pcsm_at};
use aeroweight::{Error, FlowField, FocusGrid, MicArray, Point3, SelectionMask};
use anyhow::Result;
use serde::Serialize;
use serde_json::json;

use crate::config::{read_json, ArraySpec, DamasConfig, GridSpec, RunConfig, ScenarioConfig};
use crate::data::{deconvolve, image, read_shading, CovName, Imaged, MaskName, Scene, Spectra, Target, WeightOptions, WeightingName};
use crate::manifest::{write_atomic, BandRecord, RunManifest};
use crate::maps::read_map;
use crate::{CovArgs, CsmArgs, DamasArgs, ImageArgs, MetricsArgs, PipelineArgs, StatsArgs, SynthArgs, UsageError};

pub struct Ctx {
    pub workdir: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.manifest.json"))
}

fn echo<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(value)?)
}

pub fn synth(ctx: &Ctx, args: &SynthArgs) -> Result<()> {
    let cfg: ScenarioConfig = read_json(&ctx.path(&args.config))?;
    let mut scenario = cfg.to_scenario(&ctx.workdir)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let mut manifest = RunManifest::new("synth", json!({ "args": echo(args)?, "scenario": echo(&cfg)? }), Some(scenario.seed));
    let (blocks, _) = manifest.stage("synth", |_| Ok(synthesize_blocks(&scenario)?))?;
    let out = ctx.path(&args.out);
    write_atomic(&out, |w| Ok(write_blocks(w, &blocks)?))?;
    manifest.output(&out);
    manifest.save(&sidecar(&out))
}

pub fn csm(ctx: &Ctx, args: &CsmArgs) -> Result<()> {
    let mut manifest = RunManifest::new("csm", echo(args)?, None);
    let blocks = load_blocks(ctx.path(&args.input))?;
    let csm = manifest.stage("csm", |_| Ok(estimate_csm(&blocks)?))?;
    let out = ctx.path(&args.out);
    write_atomic(&out, |w| Ok(write_matrices(w, blocks.freqs(), &csm)?))?;
    manifest.output(&out);
    if let Some(p) = &args.pcsm {
        let pcsm = manifest.stage("pcsm", |_| Ok(estimate_pcsm(&blocks)?))?;
        let path = ctx.path(p);
        write_atomic(&path, |w| Ok(write_matrices(w, blocks.freqs(), &pcsm)?))?;
        manifest.output(&path);
    }
    manifest.save(&sidecar(&out))
}

fn selected_bins(blocks: &BlockSamples, freqs_hz: &[f64]) -> Vec<usize> {
    if freqs_hz.is_empty() {
        return (0..blocks.n_freqs()).collect();
    }
    let mut bins: Vec<usize> = freqs_hz.iter().map(|f| blocks.nearest_bin(2.0 * PI * f)).collect();
    bins.sort_unstable();
    bins.dedup();
    bins
}

pub fn cov(ctx: &Ctx, args: &CovArgs) -> Result<()> {
    let mut manifest = RunManifest::new("cov", echo(args)?, None);
    let blocks = load_blocks(ctx.path(&args.input))?;
    let mask = args.mask.build(blocks.n_mics());
    let bins = selected_bins(&blocks, &args.freqs);
    let estimates = manifest.stage("covariance", |m| {
        bins.iter()
            .map(|&f| {
                let est = match args.method {
                    CovName::Gaussian => CovarianceEstimate::gaussian(&csm_at(&blocks, f), &pcsm_at(&blocks, f), blocks.n_blocks())?,
                    CovName::Sample => sample_covariance(&blocks, f)?,
                };
                let est = match args.repair {
                    Some(alpha) => {
                        let repaired = est.repaired(alpha)?;
                        if let Some(info) = &repaired.repair {
                            m.warnings.push(format!(
                                "{:.4} Hz: {} negative eigenvalues clipped, loading {}",
                                blocks.freqs()[f] / (2.0 * PI),
                                info.clipped,
                                info.alpha
                            ));
                        }
                        repaired
                    }
                    None => est,
                };
                Ok(est.reduce(&mask)?)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let freqs: Vec<f64> = bins.iter().map(|&f| blocks.freqs()[f]).collect();
    let sigmas: Vec<_> = estimates.iter().map(|e| e.sigma.clone()).collect();
    let method = estimates[0].method;
    let out = ctx.path(&args.out);
    write_atomic(&out, |w| Ok(write_covariance(w, &freqs, method, &sigmas)?))?;
    manifest.output(&out);
    manifest.save(&sidecar(&out))
}

/// Everything the imaging subcommands share.
struct Prepared {
    spectra: Spectra,
    array: MicArray,
    flow: FlowField,
    grid: FocusGrid,
    mask: SelectionMask,
    opts: WeightOptions,
    targets: Vec<Target>,
}

impl Prepared {
    fn scene(&self) -> Scene<'_> {
        Scene {
            array: &self.array,
            flow: &self.flow,
            grid: &self.grid,
            mask: &self.mask,
        }
    }
}

fn check_array(array: &MicArray, spectra: &Spectra) -> Result<()> {
    if array.len() != spectra.mics() {
        return Err(Error::InconsistentInputs(format!(
            "array has {} microphones but the data has {}",
            array.len(),
            spectra.mics()
        ))
        .into());
    }
    Ok(())
}

fn prepare(ctx: &Ctx, args: &ImageArgs) -> Result<Prepared> {
    let mut targets: Vec<Target> = args.freqs.iter().map(|&f| Target::Bin(f)).collect();
    targets.extend(args.bands.iter().map(|&f| Target::Band(f)));
    if targets.is_empty() {
        return Err(UsageError("give at least one --freq or --band".into()).into());
    }
    let spectra = match (&args.blocks, &args.csm) {
        (Some(b), None) => Spectra::from_blocks(&ctx.path(b), args.covariance, args.repair)?,
        (None, Some(c)) => Spectra::from_files(&ctx.path(c), args.cov.as_ref().map(|p| ctx.path(p)).as_deref())?,
        _ => return Err(UsageError("give exactly one of --blocks and --csm".into()).into()),
    };
    let array = ArraySpec::from_arg(&args.array)?.load(&ctx.workdir)?;
    check_array(&array, &spectra)?;
    let shading = args.shading.as_ref().map(|p| read_shading(&ctx.path(p))).transpose()?;
    Ok(Prepared {
        mask: args.mask.build(array.len()),
        spectra,
        array,
        flow: FlowField::quiescent(args.speed_of_sound)?,
        grid: GridSpec::from_arg(&args.grid)?.build()?,
        opts: WeightOptions {
            rab_alpha: args.rab_alpha,
            lowrank_mass: args.lowrank_mass,
            shading,
        },
        targets,
    })
}

fn map_file(dir: &Path, prefix: &str, imaged: &Imaged) -> PathBuf {
    dir.join(format!("{prefix}_{}_{}.csv", imaged.name.label(), imaged.target.label()))
}

pub fn beamform(ctx: &Ctx, args: &ImageArgs) -> Result<()> {
    let mut manifest = RunManifest::new("beamform", echo(args)?, None);
    let p = prepare(ctx, args)?;
    let out_dir = ctx.path(&args.out);
    for &target in &p.targets {
        let images = manifest.stage(&format!("beamform {}", target.label()), |_| {
            image(&p.spectra, &p.scene(), &args.weightings, target, &p.opts, false)
        })?;
        for im in &images {
            let path = map_file(&out_dir, "map", im);
            write_atomic(&path, |w| Ok(write_source_map_csv(w, &im.map)?))?;
            manifest.output(&path);
            manifest.bands.push(band_record(im, None, None));
        }
    }
    manifest.save(&out_dir.join("manifest.json"))
}

fn band_record(im: &Imaged, alpha: Option<f64>, flag: Option<&str>) -> BandRecord {
    BandRecord {
        target: im.target.label(),
        center_hz: im.center_omega / (2.0 * PI),
        weighting: im.name.label().to_string(),
        delta_rms: im.delta,
        alpha,
        discrepancy: flag.map(String::from),
    }
}

fn note_solution(manifest: &mut RunManifest, im: &Imaged, alpha: f64, flag: Option<&str>) {
    let what = format!("{} {}", im.name.label(), im.target.label());
    if alpha == 0.0 {
        manifest.warnings.push(format!("{what}: alpha = 0, the NNLS solution need not be unique"));
    }
    if let Some(flag) = flag.filter(|f| *f != "satisfied") {
        manifest.warnings.push(format!("{what}: discrepancy principle {flag}"));
    }
}

pub fn damas(ctx: &Ctx, args: &DamasArgs) -> Result<()> {
    let mut manifest = RunManifest::new("damas", echo(args)?, None);
    let cfg = DamasConfig {
        tau: args.tau,
        bracket: match args.bracket.as_deref() {
            Some(&[lo, hi]) => [lo, hi],
            Some(_) => return Err(UsageError("--bracket takes two values LO,HI".into()).into()),
            None => DamasConfig::default().bracket,
        },
        alpha: args.alpha,
    };
    let p = prepare(ctx, &args.image)?;
    let out_dir = ctx.path(&args.image.out);
    for &target in &p.targets {
        let images = manifest.stage(&format!("beamform {}", target.label()), |_| {
            image(&p.spectra, &p.scene(), &args.image.weightings, target, &p.opts, cfg.alpha.is_none())
        })?;
        for im in &images {
            let result = manifest.stage(&format!("damas {} {}", im.name.label(), target.label()), |_| {
                deconvolve(im, &p.scene(), &cfg)
            })?;
            let path = map_file(&out_dir, "damas", im);
            let q: Vec<f64> = result.solution.q.iter().copied().collect();
            write_atomic(&path, |w| Ok(write_damas_csv(w, &im.map, &q, result.solution.alpha)?))?;
            manifest.output(&path);
            note_solution(&mut manifest, im, result.solution.alpha, result.flag);
            manifest.bands.push(band_record(im, Some(result.solution.alpha), result.flag));
        }
    }
    manifest.save(&out_dir.join("manifest.json"))
}

fn metric_rows(frequency_hz: f64, label: &str, map: &aeroweight::beamforming::SourceMap) -> Result<Vec<ReportRow>> {
    let m = map_metrics(map)?;
    let row = |metric: &str, value: f64, flags: &str| ReportRow {
        frequency_hz,
        label: label.to_string(),
        metric: metric.to_string(),
        value,
        flags: flags.to_string(),
    };
    Ok(vec![
        row("resolution_m", m.resolution.literal, ""),
        row("resolution_main_lobe_m", m.resolution.main_lobe, ""),
        row("snr_db", m.snr.value_db, if m.snr.no_sidelobe { "no-sidelobe" } else { "" }),
        row("spr_db", m.spr, ""),
    ])
}

pub fn metrics(ctx: &Ctx, args: &MetricsArgs) -> Result<()> {
    let mut manifest = RunManifest::new("metrics", echo(args)?, None);
    let mut rows = Vec::new();
    for path in &args.maps {
        let loaded = read_map(&ctx.path(path))?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.extend(manifest.stage(&format!("metrics {label}"), |_| metric_rows(loaded.frequency_hz, &label, &loaded.map))?);
    }
    let out = ctx.path(&args.out);
    write_atomic(&out, |w| Ok(write_report_csv(w, &rows)?))?;
    manifest.output(&out);
    manifest.save(&sidecar(&out))
}

fn stats_rows(reports: &[StatsReport], label: &str) -> Vec<ReportRow> {
    reports
        .iter()
        .flat_map(|r| {
            [
                ("eps_mean", r.eps_mean),
                ("ad_acceptance_rate", r.ad_acceptance_rate),
                ("proper_ratio", r.proper_ratio),
                ("white_noise_dev", r.white_noise_dev),
            ]
            .map(|(metric, value)| ReportRow {
                frequency_hz: r.omega / (2.0 * PI),
                label: label.to_string(),
                metric: metric.to_string(),
                value,
                flags: String::new(),
            })
        })
        .collect()
}

pub fn stats(ctx: &Ctx, args: &StatsArgs) -> Result<()> {
    let mut manifest = RunManifest::new("stats", echo(args)?, None);
    let blocks = load_blocks(ctx.path(&args.input))?;
    let reports = manifest.stage("stats", |_| Ok(compute_stats(&blocks, args.significance)?))?;
    let label = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let out = ctx.path(&args.out);
    write_atomic(&out, |w| Ok(write_report_csv(w, &stats_rows(&reports, &label))?))?;
    manifest.output(&out);
    manifest.save(&sidecar(&out))
}

pub fn pipeline(ctx: &Ctx, args: &PipelineArgs) -> Result<()> {
    let cfg: RunConfig = read_json(&ctx.path(&args.config))?;
    cfg.validate(&ctx.workdir)?;
    let names = cfg.weightings.iter().map(|s| WeightingName::parse(s)).collect::<Result<Vec<_>>>()?;
    let mask_name = MaskName::parse(&cfg.mask)?;
    let method = CovName::parse(&cfg.covariance)?;
    let grid = cfg.grid.build()?;
    let out_dir = ctx.path(Path::new(&cfg.output_dir));
    let mut manifest = RunManifest::new("pipeline", echo(&cfg)?, cfg.scenario.as_ref().map(|s| s.seed));

    let (blocks, array, flow) = manifest.stage("data", |_| match (&cfg.scenario, &cfg.input) {
        (Some(s), _) => {
            let scenario = s.to_scenario(&ctx.workdir)?;
            let (blocks, _) = synthesize_blocks(&scenario)?;
            Ok((blocks, scenario.array, scenario.flow))
        }
        (None, Some(input)) => Ok((
            load_blocks(ctx.path(Path::new(&input.blocks)))?,
            input.array.load(&ctx.workdir)?,
            FlowField::new(input.speed_of_sound, Point3::from(input.mach))?,
        )),
        (None, None) => unreachable!("validated config has a data source"),
    })?;

    let stats = manifest.stage("stats", |_| Ok(compute_stats(&blocks, cfg.significance)?))?;
    let stats_path = out_dir.join("stats.csv");
    write_atomic(&stats_path, |w| Ok(write_report_csv(w, &stats_rows(&stats, "data"))?))?;
    manifest.output(&stats_path);

    let spectra = Spectra::Blocks {
        blocks,
        method,
        repair: None,
    };
    check_array(&array, &spectra)?;
    let mask = mask_name.build(array.len());
    let scene = Scene {
        array: &array,
        flow: &flow,
        grid: &grid,
        mask: &mask,
    };
    let opts = WeightOptions {
        lowrank_mass: 0.99,
        ..WeightOptions::default()
    };
    let mut rows = Vec::new();
    for &hz in &cfg.bands_hz {
        let target = Target::Band(hz);
        let images = manifest.stage(&format!("beamform {}", target.label()), |_| {
            image(&spectra, &scene, &names, target, &opts, true)
        })?;
        for im in &images {
            let path = map_file(&out_dir, "map", im);
            write_atomic(&path, |w| Ok(write_source_map_csv(w, &im.map)?))?;
            manifest.output(&path);
            match metric_rows(hz, im.name.label(), &im.map) {
                Ok(r) => rows.extend(r),
                Err(e) => manifest.warnings.push(format!("{} {}: metrics skipped: {e}", im.name.label(), target.label())),
            }
            let delta = im.delta.unwrap_or(f64::NAN);
            rows.push(ReportRow {
                frequency_hz: hz,
                label: im.name.label().to_string(),
                metric: "delta_rms".into(),
                value: delta,
                flags: String::new(),
            });
            let (alpha, flag) = match &cfg.damas {
                Some(dcfg) => {
                    let result = manifest.stage(&format!("damas {} {}", im.name.label(), target.label()), |_| {
                        deconvolve(im, &scene, dcfg)
                    })?;
                    let path = map_file(&out_dir, "damas", im);
                    let q: Vec<f64> = result.solution.q.iter().copied().collect();
                    write_atomic(&path, |w| Ok(write_damas_csv(w, &im.map, &q, result.solution.alpha)?))?;
                    manifest.output(&path);
                    note_solution(&mut manifest, im, result.solution.alpha, result.flag);
                    rows.push(ReportRow {
                        frequency_hz: hz,
                        label: im.name.label().to_string(),
                        metric: "damas_alpha".into(),
                        value: result.solution.alpha,
                        flags: result.flag.unwrap_or("fixed").to_string(),
                    });
                    (Some(result.solution.alpha), result.flag)
                }
                None => (None, None),
            };
            manifest.bands.push(band_record(im, alpha, flag));
        }
    }
    let metrics_path = out_dir.join("metrics.csv");
    write_atomic(&metrics_path, |w| Ok(write_report_csv(w, &rows)?))?;
    manifest.output(&metrics_path);
    manifest.save(&out_dir.join("manifest.json"))
}
