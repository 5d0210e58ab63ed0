//! Experiment harness shared by the command-line front end, the examples,
//! and the acceptance suite: simulate a scenario, run the back end over the
//! streams, and evaluate the result against ground truth.

use std::collections::BTreeMap;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::eval::{ate_rmse, gdop_profile, improvement_pct, scale_error_pct, Alignment, EvalReport};
use crate::geometry::{RigidTransform, TimedPose};
use crate::pipeline::{
    run_backend, BackendConfig, BackendEstimate, PipelineMode, SensorMode, StationMode,
};
use crate::simulate::{
    corrupt_odometry, generate_trajectory, simulate_toa, BaseStation, OdometryStep,
    ScenarioConfig, SyntheticTrajectory, ToaMeasurement,
};

/// Everything a scenario generates: the metric ground truth, the (noisy,
/// possibly scaled) odometry stream, the range stream, and the resolved
/// stations that produced it.
#[derive(Debug, Clone)]
pub struct SimulatedStreams {
    pub truth: Vec<TimedPose>,
    pub odometry: Vec<OdometryStep>,
    pub toa: Vec<ToaMeasurement>,
    pub stations: Vec<BaseStation>,
}

/// Ground-truth trajectory for a scenario: generated from waypoints or read
/// from the referenced trajectory file.
pub fn ground_truth_for(scenario: &ScenarioConfig) -> Result<Vec<TimedPose>, CliError> {
    if let Some(waypoints) = &scenario.trajectory.waypoints {
        let points: Vec<Vector3<f64>> = waypoints
            .iter()
            .map(|w| Vector3::from_column_slice(w))
            .collect();
        Ok(generate_trajectory(&SyntheticTrajectory::new(
            points,
            scenario.duration_s,
            scenario.odometry_rate_hz,
        ))?)
    } else {
        let path = scenario
            .trajectory
            .file
            .as_ref()
            .expect("validated scenario has waypoints or a file");
        Ok(crate::io::read_tum(path)?)
    }
}

/// Simulate every stream a scenario describes.
pub fn simulate_streams(scenario: &ScenarioConfig) -> Result<SimulatedStreams, CliError> {
    scenario.validate()?;
    let truth = ground_truth_for(scenario)?;
    let stations = scenario.resolve_stations()?;
    let odometry = corrupt_odometry(&truth, &scenario.odometry, scenario.seed);
    let toa = simulate_toa(&truth, &stations, scenario.toa_rate_hz, scenario.seed);
    Ok(SimulatedStreams {
        truth,
        odometry,
        toa,
        stations,
    })
}

/// Dead-reckon an odometry stream from the identity pose, producing the
/// trajectory a front end would report (and the TUM file we write for it).
pub fn integrate_odometry(steps: &[OdometryStep]) -> Vec<TimedPose> {
    let mut out = Vec::with_capacity(steps.len() + 1);
    let Some(first) = steps.first() else {
        return out;
    };
    let mut current = RigidTransform::identity();
    out.push(TimedPose::new(first.from_time, current.clone()));
    for step in steps {
        current = current.compose(&step.delta);
        out.push(TimedPose::new(step.to_time, current.clone()));
    }
    out
}

/// Inverse of [`integrate_odometry`]: recover relative steps from a stored
/// trajectory.
pub fn steps_from_trajectory(poses: &[TimedPose]) -> Vec<OdometryStep> {
    poses
        .windows(2)
        .map(|pair| OdometryStep {
            from_time: pair[0].time,
            to_time: pair[1].time,
            delta: pair[0].pose.inverse().compose(&pair[1].pose),
        })
        .collect()
}

/// Compose a pose with a right-perturbation of exactly the requested
/// magnitudes, in a direction drawn deterministically from the seed.
pub fn perturb_pose(
    pose: &RigidTransform,
    translation_m: f64,
    rotation_deg: f64,
    seed: u64,
) -> RigidTransform {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x7e57_0ff5);
    let axis = random_unit(&mut rng);
    let direction = random_unit(&mut rng);
    let delta = RigidTransform::new(
        UnitQuaternion::from_scaled_axis(axis * rotation_deg.to_radians()),
        direction * translation_m,
    );
    pose.compose(&delta)
}

fn random_unit(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// How to run a scenario: overrides applied on top of its stored mode, plus
/// harness behaviors (ToA suppression, transform perturbation, baseline
/// comparison).
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub sensor: Option<SensorMode>,
    pub stations: Option<StationMode>,
    pub loop_closure: Option<bool>,
    /// Drop every range measurement: the range-free baseline configuration.
    pub no_toa: bool,
    /// Offset the initial local-to-global transform by exactly
    /// `(meters, degrees)` in a seed-deterministic direction.
    pub transform_perturbation: Option<(f64, f64)>,
    /// Additionally run the same scenario without ranges and report the
    /// local-accuracy improvement over it.
    pub with_baseline: bool,
}

/// The scenario's mode with any option overrides applied.
pub fn effective_mode(scenario: &ScenarioConfig, options: &RunOptions) -> PipelineMode {
    PipelineMode {
        sensor: options.sensor.unwrap_or(scenario.mode.sensor),
        stations: options.stations.unwrap_or(scenario.mode.stations),
        loop_closure: options.loop_closure.unwrap_or(scenario.mode.loop_closure),
    }
}

/// Metrics and configuration echo for one estimation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub sensor: SensorMode,
    pub stations: StationMode,
    pub loop_closure: bool,
    /// Whether range measurements actually entered the graph.
    pub toa_used: bool,
    pub keyframes: usize,
    /// Local accuracy: ATE against local-frame truth after rigid alignment.
    pub local_ate_se3_m: f64,
    /// Local accuracy after similarity alignment; monocular runs only.
    pub local_ate_sim3_m: Option<f64>,
    /// Raw local ATE without any alignment.
    pub unaligned_local_ate_m: f64,
    /// Global accuracy without post-alignment. Absent ("N/A") when the run
    /// has no global reference: range-free baselines and unknown-station
    /// runs, whose map lives in the odometry frame.
    pub global_ate_m: Option<f64>,
    pub global_to_local_ratio: Option<f64>,
    /// Cumulative map-to-metric scale; monocular runs only.
    pub recovered_scale: Option<f64>,
    /// Deviation of the recovered scale from truth (%); monocular runs with
    /// ranges only.
    pub scale_error_pct: Option<f64>,
    /// Station-geometry quality along the true trajectory (≥4 stations).
    pub mean_gdop: Option<f64>,
    pub max_gdop: Option<f64>,
    pub improvement_over_baseline_pct: Option<f64>,
    pub baseline_name: Option<String>,
    /// The baseline run was requested but did not converge to an estimate;
    /// the improvement column then reads "undefined (baseline failed)".
    #[serde(default)]
    pub baseline_failed: bool,
}

pub fn sensor_name(sensor: SensorMode) -> &'static str {
    match sensor {
        SensorMode::RangeScaled => "range_scaled",
        SensorMode::Monocular => "monocular",
    }
}

pub fn station_mode_name(stations: StationMode) -> &'static str {
    match stations {
        StationMode::Known => "known",
        StationMode::Unknown => "unknown",
    }
}

fn csv_opt(value: Option<f64>) -> String {
    // Default float formatting round-trips exactly, so means recomputed from
    // the written rows match the written means bit for bit.
    value.map_or_else(|| "n/a".to_string(), |v| format!("{v}"))
}

impl RunReport {
    pub const CSV_HEADER: &'static str = "seed,sensor,stations,loop_closure,toa,keyframes,\
        local_ate_se3_m,local_ate_sim3_m,unaligned_local_ate_m,global_ate_m,\
        global_to_local_ratio,recovered_scale,scale_error_pct,mean_gdop,max_gdop,\
        improvement_over_baseline_pct,baseline";

    pub fn csv_row(&self) -> String {
        let improvement = if self.baseline_failed {
            "undefined (baseline failed)".to_string()
        } else {
            csv_opt(self.improvement_over_baseline_pct)
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            sensor_name(self.sensor),
            station_mode_name(self.stations),
            self.loop_closure,
            self.toa_used,
            self.keyframes,
            self.local_ate_se3_m,
            csv_opt(self.local_ate_sim3_m),
            self.unaligned_local_ate_m,
            csv_opt(self.global_ate_m),
            csv_opt(self.global_to_local_ratio),
            csv_opt(self.recovered_scale),
            csv_opt(self.scale_error_pct),
            csv_opt(self.mean_gdop),
            csv_opt(self.max_gdop),
            improvement,
            self.baseline_name.as_deref().unwrap_or("n/a"),
        )
    }

    /// The local-accuracy figure comparisons should use: similarity-aligned
    /// for monocular runs (whose raw map has no metric scale), rigid-aligned
    /// otherwise.
    pub fn comparison_local_ate(&self) -> f64 {
        self.local_ate_sim3_m.unwrap_or(self.local_ate_se3_m)
    }
}

/// A finished run: the back end's estimate plus its evaluation.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimate: BackendEstimate,
    pub report: RunReport,
}

/// Serializable digest of a [`BackendEstimate`] (poses go to TUM files
/// separately). Transform layout: `[tx, ty, tz, qx, qy, qz, qw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub t_go: [f64; 7],
    pub scale: f64,
    pub biases: BTreeMap<u32, f64>,
    pub stations: BTreeMap<u32, [f64; 3]>,
    pub keyframes: usize,
}

impl EstimateSummary {
    pub fn from_estimate(estimate: &BackendEstimate) -> Self {
        let t = estimate.t_go.translation();
        let q = estimate.t_go.rotation();
        Self {
            t_go: [t.x, t.y, t.z, q.i, q.j, q.k, q.w],
            scale: estimate.scale,
            biases: estimate.biases.clone(),
            stations: estimate
                .stations
                .iter()
                .map(|(id, p)| (*id, [p.x, p.y, p.z]))
                .collect(),
            keyframes: estimate.keyframes.len(),
        }
    }
}

/// Run the back end over already-simulated (or loaded) streams and evaluate
/// the result.
pub fn run_streams(
    scenario: &ScenarioConfig,
    streams: &SimulatedStreams,
    options: &RunOptions,
) -> Result<RunOutput, CliError> {
    let mode = effective_mode(scenario, options);
    let mut effective = scenario.clone();
    effective.mode = mode;
    let mut config = BackendConfig::from_scenario(&effective)?;

    if mode.stations == StationMode::Known {
        let mut t_go = streams.truth[0].pose.clone();
        if let Some((meters, degrees)) = options.transform_perturbation {
            t_go = perturb_pose(&t_go, meters, degrees, scenario.seed);
        }
        config.t_go_init = t_go;
    } else if options.transform_perturbation.is_some() {
        return Err(CliError::Usage(
            "a transform perturbation requires known stations; with unknown stations \
             the local-to-global transform is held fixed"
                .into(),
        ));
    }
    if mode.loop_closure {
        config.loop_closure_truth = Some(streams.truth.clone());
        config.loop_closure_seed = scenario.seed;
    }

    let toa: &[ToaMeasurement] = if options.no_toa { &[] } else { &streams.toa };
    let estimate = run_backend(&streams.odometry, toa, mode, &config)?;
    let mut report = evaluate_run(scenario, mode, streams, !toa.is_empty(), &estimate)?;

    if options.with_baseline {
        let baseline_options = RunOptions {
            no_toa: true,
            with_baseline: false,
            transform_perturbation: None,
            ..options.clone()
        };
        report.baseline_name = Some("no_toa".into());
        match run_streams(scenario, streams, &baseline_options) {
            Ok(baseline) => {
                let base = baseline.report.comparison_local_ate();
                if base > 0.0 {
                    report.improvement_over_baseline_pct =
                        Some(improvement_pct(base, report.comparison_local_ate()));
                }
            }
            Err(_) => report.baseline_failed = true,
        }
    }

    Ok(RunOutput { estimate, report })
}

/// Simulate a scenario and run it in one step.
pub fn run_scenario(
    scenario: &ScenarioConfig,
    options: &RunOptions,
) -> Result<RunOutput, CliError> {
    let streams = simulate_streams(scenario)?;
    run_streams(scenario, &streams, options)
}

fn evaluate_run(
    scenario: &ScenarioConfig,
    mode: PipelineMode,
    streams: &SimulatedStreams,
    toa_used: bool,
    estimate: &BackendEstimate,
) -> Result<RunReport, CliError> {
    let truth = &streams.truth;
    let anchor = truth[0].pose.inverse();
    let local_truth: Vec<TimedPose> = truth
        .iter()
        .map(|tp| TimedPose::new(tp.time, anchor.compose(&tp.pose)))
        .collect();
    let monocular = mode.sensor == SensorMode::Monocular;

    let se3 = ate_rmse(&estimate.keyframes, &local_truth, Alignment::Se3)?;
    let sim3 = if monocular {
        Some(ate_rmse(&estimate.keyframes, &local_truth, Alignment::Sim3)?.rmse_m)
    } else {
        None
    };
    let unaligned = ate_rmse(&estimate.keyframes, &local_truth, Alignment::None)?;

    // A global comparison needs a global reference: surveyed stations and at
    // least one range in the graph. Range-free baselines and unknown-station
    // runs keep their map in the odometry frame, so their global error is
    // reported as absent rather than as a number that mixes frames.
    let global = if mode.stations == StationMode::Known && toa_used {
        Some(ate_rmse(&estimate.global_trajectory, truth, Alignment::None)?.rmse_m)
    } else {
        None
    };
    let local_for_ratio = sim3.unwrap_or(se3.rmse_m);
    let ratio = global.map(|g| g / local_for_ratio);

    let positions: Vec<Vector3<f64>> = streams.stations.iter().map(|s| s.position).collect();
    let (mean_gdop, max_gdop) = if positions.len() >= 4 {
        match gdop_profile(truth, &positions) {
            Ok(profile) => (Some(profile.mean), Some(profile.max)),
            Err(_) => (None, None),
        }
    } else {
        (None, None)
    };

    let recovered_scale = monocular.then_some(estimate.scale);
    let scale_error = if monocular && toa_used {
        let true_scale = 1.0 / scenario.odometry.scale_drift;
        Some(scale_error_pct(estimate.scale, true_scale))
    } else {
        None
    };

    if let (Some(global_ate), Some(ratio)) = (global, ratio) {
        let check = EvalReport {
            local_ate_se3_m: se3.rmse_m,
            local_ate_sim3_m: sim3,
            unaligned_local_ate_m: unaligned.rmse_m,
            global_ate_m: global_ate,
            scale_error_pct: scale_error,
            global_to_local_ratio: ratio,
            mean_gdop,
            max_gdop,
            improvement_over_baseline_pct: None,
            baseline_name: None,
        };
        check.validate().map_err(CliError::Report)?;
    }

    Ok(RunReport {
        seed: scenario.seed,
        sensor: mode.sensor,
        stations: mode.stations,
        loop_closure: mode.loop_closure,
        toa_used,
        keyframes: estimate.keyframes.len(),
        local_ate_se3_m: se3.rmse_m,
        local_ate_sim3_m: sim3,
        unaligned_local_ate_m: unaligned.rmse_m,
        global_ate_m: global,
        global_to_local_ratio: ratio,
        recovered_scale,
        scale_error_pct: scale_error,
        mean_gdop,
        max_gdop,
        improvement_over_baseline_pct: None,
        baseline_name: None,
        baseline_failed: false,
    })
}
