//! Command-line harness tying simulation, estimation, and evaluation into
//! reproducible experiments: `simulate`, `run`, `eval`, `gdop`, and `sweep`
//! subcommands with uniform `--config` / `--out` / `--seed` flags.
//!
//! Exit codes: 0 success, 1 scenario failure, 2 usage error (the argument
//! parser also exits with 2 on malformed flags). Every command writes only
//! inside its `--out` directory.

pub mod experiments;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use crate::eval::{ate_rmse, gdop_profile, Alignment, EvalError, GdopProfile};
use crate::geometry::TimedPose;
use crate::io::{
    load_manifest, load_scenario, read_toa_csv, read_tum, save_manifest, save_scenario,
    write_gdop_csv, write_toa_csv, write_tum, IoError, ManifestArtifacts, RunManifest,
};
use crate::pipeline::{PipelineError, SensorMode, StationMode};
use crate::simulate::presets::{gdop_study_waypoints, named_scenario, StationLayout, PRESET_NAMES};
use crate::simulate::{
    generate_trajectory, FrequencyPreset, ScenarioConfig, SimulateError, StationConfig,
    SyntheticTrajectory, ToaMeasurement,
};
use experiments::{
    integrate_odometry, run_scenario, run_streams, simulate_streams, steps_from_trajectory,
    EstimateSummary, RunOptions, RunReport, SimulatedStreams,
};

/// Duration (s) and sample rate (Hz) of the station-geometry study flight;
/// pinned because the study's regression value is computed over exactly this
/// sampling.
const GDOP_STUDY_DURATION_S: f64 = 90.0;
const GDOP_STUDY_RATE_HZ: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    /// An evaluation report violated its own invariants — an internal bug,
    /// surfaced rather than silently written.
    #[error("inconsistent evaluation: {0}")]
    Report(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// Process exit code: 2 for usage errors, 1 for scenario failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Short machine-readable category for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io(_) => "io",
            CliError::Simulate(_) => "simulate",
            CliError::Pipeline(_) => "pipeline",
            CliError::Eval(_) => "eval",
            CliError::Report(_) => "report",
            CliError::Usage(_) => "usage",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "toa-slam",
    version,
    about = "Simulate, estimate, and evaluate range-aided trajectory estimation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ground truth, odometry, and range streams for a scenario.
    Simulate(SimulateArgs),
    /// Run the estimation back end over simulated or recorded streams.
    Run(RunArgs),
    /// Compare two trajectory files under a chosen alignment.
    Eval(EvalArgs),
    /// Analyze station geometry (GDOP) for scenarios or the bundled layouts.
    Gdop(GdopArgs),
    /// Run an experiment grid over seeds, frequencies, or station layouts.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (TOML) or bundled preset name.
    #[arg(long)]
    pub config: String,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Manifest written by `simulate`; provides the scenario and streams.
    #[arg(long, conflicts_with_all = ["config", "odometry", "toa", "truth"])]
    pub manifest: Option<PathBuf>,
    /// Scenario file or preset (with explicit stream paths).
    #[arg(long)]
    pub config: Option<String>,
    /// Odometry trajectory (TUM) to estimate from.
    #[arg(long, requires = "config", requires = "truth")]
    pub odometry: Option<PathBuf>,
    /// Range measurements (CSV).
    #[arg(long)]
    pub toa: Option<PathBuf>,
    /// Ground-truth trajectory (TUM) for evaluation and loop-closure truth.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scenario's seed (loop-closure noise, perturbation
    /// direction).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the sensor mode: range_scaled | monocular.
    #[arg(long)]
    pub mode: Option<String>,
    /// Override the station mode: known | unknown.
    #[arg(long)]
    pub stations: Option<String>,
    /// Override loop closure: on | off.
    #[arg(long)]
    pub loop_closure: Option<String>,
    /// Drop all range measurements (range-free baseline; global ATE becomes
    /// N/A).
    #[arg(long)]
    pub no_toa: bool,
    /// Offset the initial local-to-global transform: "METERS,DEGREES".
    #[arg(long)]
    pub perturb_transform: Option<String>,
    /// Also run a range-free baseline and report the local improvement.
    #[arg(long)]
    pub baseline_no_toa: bool,
}

impl RunArgs {
    /// Arguments for a manifest-driven run with no overrides.
    pub fn from_manifest(manifest: &Path, out: &Path) -> Self {
        Self {
            manifest: Some(manifest.to_path_buf()),
            config: None,
            odometry: None,
            toa: None,
            truth: None,
            out: out.to_path_buf(),
            seed: None,
            mode: None,
            stations: None,
            loop_closure: None,
            no_toa: false,
            perturb_transform: None,
            baseline_no_toa: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM).
    #[arg(long)]
    pub estimate: PathBuf,
    /// Reference trajectory (TUM).
    #[arg(long)]
    pub reference: PathBuf,
    /// Alignment to remove first: none | se3 | sim3. Default: all three.
    #[arg(long)]
    pub alignment: Option<String>,
    /// Write the result CSV here instead of only printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GdopArgs {
    /// Scenario files or presets; several produce a ranking.
    #[arg(long)]
    pub config: Vec<String>,
    /// Analyze the five bundled station layouts over the low study flight.
    #[arg(long)]
    pub layouts: bool,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Template scenario file or preset.
    #[arg(long)]
    pub config: String,
    /// Sweep axis: seeds | frequency | layouts.
    #[arg(long)]
    pub axis: String,
    /// Cells per axis value (consecutive seeds starting at the template's).
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the template's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run a range-free baseline per cell and add improvement columns.
    #[arg(long)]
    pub baseline_no_toa: bool,
}

/// Dispatch a parsed command line; returns the human-readable summary the
/// binary prints.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let manifest = cmd_simulate(&args.config, &args.out, args.seed)?;
            Ok(format!(
                "simulated scenario (seed {}) into {}",
                manifest.seed,
                manifest.out_dir.display()
            ))
        }
        Command::Run(args) => {
            let (report, manifest) = cmd_run(&args)?;
            let mut lines = vec![format!(
                "local ATE (rigid-aligned): {:.4} m over {} keyframes",
                report.local_ate_se3_m, report.keyframes
            )];
            if let Some(sim3) = report.local_ate_sim3_m {
                lines.push(format!("local ATE (similarity-aligned): {sim3:.4} m"));
            }
            match report.global_ate_m {
                Some(g) => lines.push(format!("global ATE (unaligned): {g:.4} m")),
                None => lines.push("global ATE: N/A (no global reference)".into()),
            }
            if let Some(scale) = report.recovered_scale {
                lines.push(format!("recovered scale: {scale:.4}"));
            }
            if report.baseline_failed {
                lines.push("improvement over no_toa: undefined (baseline failed)".into());
            } else if let Some(improvement) = report.improvement_over_baseline_pct {
                lines.push(format!("improvement over no_toa: {improvement:.1}%"));
            }
            lines.push(format!("artifacts: {}", manifest.out_dir.display()));
            Ok(lines.join("\n"))
        }
        Command::Eval(args) => cmd_eval(
            &args.estimate,
            &args.reference,
            args.alignment.as_deref(),
            args.out.as_deref(),
        ),
        Command::Gdop(args) => {
            let ranked = cmd_gdop(&args.config, args.layouts, &args.out)?;
            Ok(ranked
                .iter()
                .map(|(name, profile)| {
                    format!("{name}: mean GDOP {:.3}, max {:.3}", profile.mean, profile.max)
                })
                .collect::<Vec<_>>()
                .join("\n"))
        }
        Command::Sweep(args) => {
            let csv = cmd_sweep(&args)?;
            Ok(format!("sweep table: {}", csv.display()))
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), IoError> {
    std::fs::create_dir_all(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    std::fs::write(path, text).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a scenario from a TOML file or by bundled preset name, applying the
/// seed override. Relative trajectory-file references resolve against the
/// scenario file's directory.
pub fn load_config_or_preset(
    config: &str,
    seed: Option<u64>,
) -> Result<ScenarioConfig, CliError> {
    let path = Path::new(config);
    let mut scenario = if path.is_file() {
        let mut scenario = load_scenario(path)?;
        if let Some(file) = &scenario.trajectory.file {
            if file.is_relative() {
                let base = path.parent().unwrap_or_else(|| Path::new("."));
                scenario.trajectory.file = Some(base.join(file));
            }
        }
        scenario
    } else if let Some(scenario) = named_scenario(config, seed.unwrap_or(0)) {
        scenario
    } else {
        return Err(CliError::Usage(format!(
            "config {config:?} is neither a readable file nor a bundled preset ({})",
            PRESET_NAMES.join(", ")
        )));
    };
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

/// Simulate a scenario into an output directory: scenario copy, ground
/// truth, dead-reckoned odometry, range CSV, and the manifest tying them
/// together. Re-running with the same inputs reproduces every file byte for
/// byte.
pub fn cmd_simulate(
    config: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<RunManifest, CliError> {
    let scenario = load_config_or_preset(config, seed)?;
    ensure_dir(out)?;
    let streams = simulate_streams(&scenario)?;

    let scenario_path = out.join("scenario.toml");
    save_scenario(&scenario_path, &scenario)?;
    let truth_path = out.join("ground_truth.tum");
    write_tum(&truth_path, &streams.truth)?;
    let odometry_path = out.join("odometry.tum");
    write_tum(&odometry_path, &integrate_odometry(&streams.odometry))?;
    let toa_path = out.join("toa.csv");
    write_toa_csv(&toa_path, &streams.toa)?;

    let manifest = RunManifest {
        scenario_config: scenario_path,
        seed: scenario.seed,
        out_dir: out.to_path_buf(),
        artifacts: ManifestArtifacts {
            ground_truth: Some(truth_path),
            odometry: Some(odometry_path),
            toa: Some(toa_path),
            ..Default::default()
        },
    };
    save_manifest(&out.join("manifest.json"), &manifest)?;
    manifest.validate()?;
    Ok(manifest)
}

fn parse_sensor(s: &str) -> Result<SensorMode, CliError> {
    match s {
        "range_scaled" => Ok(SensorMode::RangeScaled),
        "monocular" => Ok(SensorMode::Monocular),
        other => Err(CliError::Usage(format!(
            "--mode must be range_scaled or monocular, got {other:?}"
        ))),
    }
}

fn parse_station_mode(s: &str) -> Result<StationMode, CliError> {
    match s {
        "known" => Ok(StationMode::Known),
        "unknown" => Ok(StationMode::Unknown),
        other => Err(CliError::Usage(format!(
            "--stations must be known or unknown, got {other:?}"
        ))),
    }
}

fn parse_on_off(s: &str) -> Result<bool, CliError> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(CliError::Usage(format!(
            "--loop-closure must be on or off, got {other:?}"
        ))),
    }
}

fn parse_perturbation(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || {
        CliError::Usage(format!(
            "--perturb-transform must be \"METERS,DEGREES\", got {s:?}"
        ))
    };
    let (meters, degrees) = s.split_once(',').ok_or_else(bad)?;
    let meters: f64 = meters.trim().parse().map_err(|_| bad())?;
    let degrees: f64 = degrees.trim().parse().map_err(|_| bad())?;
    if !(meters >= 0.0 && degrees >= 0.0) {
        return Err(bad());
    }
    Ok((meters, degrees))
}

fn parse_run_options(args: &RunArgs) -> Result<RunOptions, CliError> {
    Ok(RunOptions {
        sensor: args.mode.as_deref().map(parse_sensor).transpose()?,
        stations: args
            .stations
            .as_deref()
            .map(parse_station_mode)
            .transpose()?,
        loop_closure: args.loop_closure.as_deref().map(parse_on_off).transpose()?,
        no_toa: args.no_toa,
        transform_perturbation: args
            .perturb_transform
            .as_deref()
            .map(parse_perturbation)
            .transpose()?,
        with_baseline: args.baseline_no_toa,
    })
}

struct RunInputs {
    scenario: ScenarioConfig,
    truth: Vec<TimedPose>,
    odometry_poses: Vec<TimedPose>,
    toa: Vec<ToaMeasurement>,
    /// Paths echoed into the run manifest.
    sources: ManifestArtifacts,
}

fn load_run_inputs(args: &RunArgs) -> Result<RunInputs, CliError> {
    if let Some(manifest_path) = &args.manifest {
        if args.config.is_some() || args.odometry.is_some() || args.truth.is_some() {
            return Err(CliError::Usage(
                "--manifest conflicts with explicit --config/--odometry/--truth inputs".into(),
            ));
        }
        let manifest = load_manifest(manifest_path)?;
        manifest.validate()?;
        let mut scenario = load_scenario(&manifest.scenario_config)?;
        if let Some(seed) = args.seed {
            scenario.seed = seed;
        }
        let missing = |what: &str| {
            CliError::Usage(format!("manifest {manifest_path:?} lists no {what} artifact"))
        };
        let truth_path = manifest
            .artifacts
            .ground_truth
            .clone()
            .ok_or_else(|| missing("ground-truth"))?;
        let odometry_path = manifest
            .artifacts
            .odometry
            .clone()
            .ok_or_else(|| missing("odometry"))?;
        let truth = read_tum(&truth_path)?;
        let odometry_poses = read_tum(&odometry_path)?;
        let toa = match &manifest.artifacts.toa {
            Some(path) => read_toa_csv(path)?,
            None => Vec::new(),
        };
        Ok(RunInputs {
            scenario,
            truth,
            odometry_poses,
            toa,
            sources: ManifestArtifacts {
                ground_truth: Some(truth_path),
                odometry: Some(odometry_path),
                toa: manifest.artifacts.toa.clone(),
                ..Default::default()
            },
        })
    } else {
        let config = args.config.as_ref().ok_or_else(|| {
            CliError::Usage("provide --manifest, or --config with --odometry and --truth".into())
        })?;
        let scenario = load_config_or_preset(config, args.seed)?;
        let odometry_path = args.odometry.clone().ok_or_else(|| {
            CliError::Usage("--odometry (TUM file) is required without a manifest".into())
        })?;
        let truth_path = args.truth.clone().ok_or_else(|| {
            CliError::Usage("--truth (TUM file) is required without a manifest".into())
        })?;
        let truth = read_tum(&truth_path)?;
        let odometry_poses = read_tum(&odometry_path)?;
        let toa = match &args.toa {
            Some(path) => read_toa_csv(path)?,
            None => Vec::new(),
        };
        Ok(RunInputs {
            scenario,
            truth,
            odometry_poses,
            toa,
            sources: ManifestArtifacts {
                ground_truth: Some(truth_path),
                odometry: Some(odometry_path),
                toa: args.toa.clone(),
                ..Default::default()
            },
        })
    }
}

/// Run the back end over the inputs named by a manifest or explicit paths,
/// writing estimate files, the evaluation report, and a run manifest into
/// `--out`. Pipeline failures leave a machine-readable `error.json` behind
/// and exit nonzero.
pub fn cmd_run(args: &RunArgs) -> Result<(RunReport, RunManifest), CliError> {
    let options = parse_run_options(args)?;
    let inputs = load_run_inputs(args)?;
    ensure_dir(&args.out)?;

    let streams = SimulatedStreams {
        truth: inputs.truth,
        odometry: steps_from_trajectory(&inputs.odometry_poses),
        toa: inputs.toa,
        stations: inputs.scenario.resolve_stations()?,
    };

    match run_streams(&inputs.scenario, &streams, &options) {
        Ok(output) => {
            let scenario_path = args.out.join("scenario.toml");
            save_scenario(&scenario_path, &inputs.scenario)?;
            let local_path = args.out.join("estimate_local.tum");
            write_tum(&local_path, &output.estimate.keyframes)?;
            let global_path = args.out.join("estimate_global.tum");
            write_tum(&global_path, &output.estimate.global_trajectory)?;
            let summary_path = args.out.join("estimate.json");
            let summary = EstimateSummary::from_estimate(&output.estimate);
            write_text(
                &summary_path,
                &format!(
                    "{}\n",
                    serde_json::to_string_pretty(&summary).expect("summary serializes")
                ),
            )?;
            let report_json_path = args.out.join("report.json");
            write_text(
                &report_json_path,
                &format!(
                    "{}\n",
                    serde_json::to_string_pretty(&output.report).expect("report serializes")
                ),
            )?;
            let report_csv_path = args.out.join("report.csv");
            write_text(
                &report_csv_path,
                &format!("{}\n{}\n", RunReport::CSV_HEADER, output.report.csv_row()),
            )?;

            let manifest = RunManifest {
                scenario_config: scenario_path,
                seed: inputs.scenario.seed,
                out_dir: args.out.clone(),
                artifacts: ManifestArtifacts {
                    estimate_local: Some(local_path),
                    estimate_global: Some(global_path),
                    estimate_summary: Some(summary_path),
                    report_json: Some(report_json_path),
                    report_csv: Some(report_csv_path),
                    ..inputs.sources
                },
            };
            save_manifest(&args.out.join("run_manifest.json"), &manifest)?;
            manifest.validate()?;
            Ok((output.report, manifest))
        }
        Err(err) => {
            let record = serde_json::json!({
                "error": err.kind(),
                "message": err.to_string(),
            });
            write_text(
                &args.out.join("error.json"),
                &format!("{}\n", serde_json::to_string_pretty(&record).unwrap()),
            )?;
            Err(err)
        }
    }
}

fn parse_alignment(s: &str) -> Result<Alignment, CliError> {
    match s {
        "none" => Ok(Alignment::None),
        "se3" => Ok(Alignment::Se3),
        "sim3" => Ok(Alignment::Sim3),
        other => Err(CliError::Usage(format!(
            "--alignment must be none, se3, or sim3, got {other:?}"
        ))),
    }
}

fn alignment_name(a: Alignment) -> &'static str {
    match a {
        Alignment::None => "none",
        Alignment::Se3 => "se3",
        Alignment::Sim3 => "sim3",
    }
}

/// Compare two trajectory files; returns (and optionally writes) a CSV with
/// one row per requested alignment.
pub fn cmd_eval(
    estimate: &Path,
    reference: &Path,
    alignment: Option<&str>,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let est = read_tum(estimate)?;
    let reference = read_tum(reference)?;
    let alignments = match alignment {
        Some(s) => vec![parse_alignment(s)?],
        None => vec![Alignment::None, Alignment::Se3, Alignment::Sim3],
    };
    let mut text = String::from("alignment,ate_rmse_m,scale\n");
    for a in alignments {
        let result = ate_rmse(&est, &reference, a)?;
        text.push_str(&format!(
            "{},{},{}\n",
            alignment_name(a),
            result.rmse_m,
            result
                .scale
                .map_or_else(|| "n/a".to_string(), |s| format!("{s}")),
        ));
    }
    if let Some(path) = out {
        write_text(path, &text)?;
    }
    Ok(text)
}

/// The low box flight the station-geometry study flies (station layouts
/// reach 3 m high; the study samples them from below).
pub fn gdop_study_trajectory() -> Vec<TimedPose> {
    let waypoints: Vec<Vector3<f64>> = gdop_study_waypoints()
        .iter()
        .map(|w| Vector3::from_column_slice(w))
        .collect();
    generate_trajectory(&SyntheticTrajectory::new(
        waypoints,
        GDOP_STUDY_DURATION_S,
        GDOP_STUDY_RATE_HZ,
    ))
    .expect("study trajectory stays inside the default bounds")
}

/// Compute GDOP profiles for the given scenarios and/or the five bundled
/// layouts; writes one series CSV per entry plus a ranking CSV when several
/// entries compete. Returns the entries sorted best (lowest mean) first.
pub fn cmd_gdop(
    configs: &[String],
    layouts: bool,
    out: &Path,
) -> Result<Vec<(String, GdopProfile)>, CliError> {
    ensure_dir(out)?;
    let mut entries: Vec<(String, Vec<TimedPose>, Vec<Vector3<f64>>)> = Vec::new();
    for config in configs {
        let scenario = load_config_or_preset(config, None)?;
        let trajectory = experiments::ground_truth_for(&scenario)?;
        let positions = scenario
            .resolve_stations()?
            .iter()
            .map(|s| s.position)
            .collect();
        let name = Path::new(config)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| config.clone());
        entries.push((name, trajectory, positions));
    }
    if layouts {
        let trajectory = gdop_study_trajectory();
        for layout in StationLayout::all() {
            entries.push((
                layout.name().to_string(),
                trajectory.clone(),
                layout.positions().to_vec(),
            ));
        }
    }
    if entries.is_empty() {
        return Err(CliError::Usage(
            "gdop needs at least one --config or --layouts".into(),
        ));
    }

    let mut results = Vec::new();
    for (name, trajectory, positions) in entries {
        let profile = gdop_profile(&trajectory, &positions)?;
        write_gdop_csv(&out.join(format!("gdop_{name}.csv")), &profile)?;
        results.push((name, profile));
    }
    results.sort_by(|a, b| a.1.mean.total_cmp(&b.1.mean));
    if results.len() > 1 {
        let mut ranking = String::from("rank,configuration,mean_gdop,max_gdop,singular_samples\n");
        for (rank, (name, profile)) in results.iter().enumerate() {
            ranking.push_str(&format!(
                "{},{},{},{},{}\n",
                rank + 1,
                name,
                profile.mean,
                profile.max,
                profile.singular_count
            ));
        }
        write_text(&out.join("ranking.csv"), &ranking)?;
    }
    Ok(results)
}

enum SweepAxis {
    Seeds,
    Frequency,
    Layouts,
}

fn parse_axis(s: &str) -> Result<SweepAxis, CliError> {
    match s {
        "seeds" => Ok(SweepAxis::Seeds),
        "frequency" => Ok(SweepAxis::Frequency),
        "layouts" => Ok(SweepAxis::Layouts),
        other => Err(CliError::Usage(format!(
            "--axis must be seeds, frequency, or layouts, got {other:?}"
        ))),
    }
}

/// Clear per-station overrides so an envelope preset governs the noise.
fn clear_station_noise(stations: &mut [StationConfig]) {
    for s in stations {
        s.sigma_m = None;
        s.bias_m = None;
    }
}

fn sweep_cells(
    template: &ScenarioConfig,
    axis: &SweepAxis,
    runs: usize,
) -> Vec<(String, ScenarioConfig)> {
    let seeds = |scenario: &ScenarioConfig| -> Vec<u64> {
        (0..runs as u64).map(|i| scenario.seed + i).collect()
    };
    let mut cells = Vec::new();
    match axis {
        SweepAxis::Seeds => {
            for seed in seeds(template) {
                let mut scenario = template.clone();
                scenario.seed = seed;
                cells.push((format!("{seed}"), scenario));
            }
        }
        SweepAxis::Frequency => {
            for freq in [FrequencyPreset::Ghz28, FrequencyPreset::Ghz78] {
                let name = match freq {
                    FrequencyPreset::Ghz28 => "ghz28",
                    FrequencyPreset::Ghz78 => "ghz78",
                };
                for seed in seeds(template) {
                    let mut scenario = template.clone();
                    scenario.frequency = Some(freq);
                    clear_station_noise(&mut scenario.stations);
                    scenario.seed = seed;
                    cells.push((name.to_string(), scenario));
                }
            }
        }
        SweepAxis::Layouts => {
            for layout in StationLayout::all() {
                for seed in seeds(template) {
                    let mut scenario = template.clone();
                    scenario.stations = layout
                        .positions()
                        .iter()
                        .enumerate()
                        .map(|(i, p)| StationConfig {
                            id: i as u32 + 1,
                            position: [p.x, p.y, p.z],
                            sigma_m: None,
                            bias_m: None,
                            intervals: Vec::new(),
                        })
                        .collect();
                    scenario.frequency = scenario.frequency.or(Some(FrequencyPreset::Ghz78));
                    scenario.seed = seed;
                    cells.push((layout.name().to_string(), scenario));
                }
            }
        }
    }
    cells
}

/// Numeric sweep columns aggregated into per-value mean rows.
fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().copied().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Run an experiment grid and aggregate it into `sweep.csv`: one row per
/// cell plus a mean row per axis value. Failed cells are flagged in place
/// and the sweep continues.
pub fn cmd_sweep(args: &SweepArgs) -> Result<PathBuf, CliError> {
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    let axis = parse_axis(&args.axis)?;
    let template = load_config_or_preset(&args.config, args.seed)?;
    ensure_dir(&args.out)?;
    let options = RunOptions {
        with_baseline: args.baseline_no_toa,
        ..Default::default()
    };

    let header = "axis_value,seed,status,local_ate_se3_m,local_ate_sim3_m,\
        unaligned_local_ate_m,global_ate_m,global_to_local_ratio,recovered_scale,\
        scale_error_pct,improvement_over_baseline_pct";
    let mut rows: Vec<String> = Vec::new();
    // (axis value, per-cell report) in first-appearance order.
    let mut by_value: Vec<(String, Vec<RunReport>)> = Vec::new();

    for (value, scenario) in sweep_cells(&template, &axis, args.runs) {
        let cell_dir = args.out.join(format!("{value}_seed{}", scenario.seed));
        ensure_dir(&cell_dir)?;
        match run_scenario(&scenario, &options) {
            Ok(output) => {
                write_text(
                    &cell_dir.join("report.json"),
                    &format!(
                        "{}\n",
                        serde_json::to_string_pretty(&output.report).expect("report serializes")
                    ),
                )?;
                let r = &output.report;
                let improvement = if r.baseline_failed {
                    "undefined (baseline failed)".to_string()
                } else {
                    r.improvement_over_baseline_pct
                        .map_or_else(|| "n/a".to_string(), |v| format!("{v}"))
                };
                rows.push(format!(
                    "{},{},ok,{},{},{},{},{},{},{},{}",
                    value,
                    r.seed,
                    r.local_ate_se3_m,
                    r.local_ate_sim3_m
                        .map_or_else(|| "n/a".to_string(), |v| format!("{v}")),
                    r.unaligned_local_ate_m,
                    r.global_ate_m
                        .map_or_else(|| "n/a".to_string(), |v| format!("{v}")),
                    r.global_to_local_ratio
                        .map_or_else(|| "n/a".to_string(), |v| format!("{v}")),
                    r.recovered_scale
                        .map_or_else(|| "n/a".to_string(), |v| format!("{v}")),
                    r.scale_error_pct
                        .map_or_else(|| "n/a".to_string(), |v| format!("{v}")),
                    improvement,
                ));
                match by_value.iter_mut().find(|(v, _)| *v == value) {
                    Some((_, reports)) => reports.push(output.report),
                    None => by_value.push((value.clone(), vec![output.report])),
                }
            }
            Err(err) => {
                let record = serde_json::json!({
                    "error": err.kind(),
                    "message": err.to_string(),
                });
                write_text(
                    &cell_dir.join("error.json"),
                    &format!("{}\n", serde_json::to_string_pretty(&record).unwrap()),
                )?;
                let message = err.to_string().replace(',', ";").replace('\n', " ");
                rows.push(format!(
                    "{},{},failed: {},n/a,n/a,n/a,n/a,n/a,n/a,n/a,n/a",
                    value, scenario.seed, message
                ));
                if !by_value.iter().any(|(v, _)| *v == value) {
                    by_value.push((value.clone(), Vec::new()));
                }
            }
        }
    }

    let mut text = format!("{header}\n");
    for row in &rows {
        text.push_str(row);
        text.push('\n');
    }
    for (value, reports) in &by_value {
        if reports.is_empty() {
            text.push_str(&format!(
                "{value},mean,no successful cells,n/a,n/a,n/a,n/a,n/a,n/a,n/a,n/a\n"
            ));
            continue;
        }
        let col = |f: &dyn Fn(&RunReport) -> Option<f64>| -> String {
            mean_of(&reports.iter().map(f).collect::<Vec<_>>())
                .map_or_else(|| "n/a".to_string(), |v| format!("{v}"))
        };
        text.push_str(&format!(
            "{},mean,ok ({}/{}),{},{},{},{},{},{},{},{}\n",
            value,
            reports.len(),
            args.runs,
            col(&|r| Some(r.local_ate_se3_m)),
            col(&|r| r.local_ate_sim3_m),
            col(&|r| Some(r.unaligned_local_ate_m)),
            col(&|r| r.global_ate_m),
            col(&|r| r.global_to_local_ratio),
            col(&|r| r.recovered_scale),
            col(&|r| r.scale_error_pct),
            col(&|r| r.improvement_over_baseline_pct),
        ));
    }
    let csv_path = args.out.join("sweep.csv");
    write_text(&csv_path, &text)?;
    Ok(csv_path)
}
