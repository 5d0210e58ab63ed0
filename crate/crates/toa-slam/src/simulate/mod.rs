//! Scenario generation: ground-truth trajectories, corrupted odometry
//! streams, and time-of-arrival range streams with configurable per-station
//! noise statistics and visibility schedules.
//!
//! Everything here is deterministic given a seed. Per-station range streams
//! use independent generators derived from `(seed, station id)`, so adding or
//! removing a station never changes the draws of the others.

pub mod presets;

use crate::geometry::{RigidTransform, TimedPose, Twist};
use crate::pipeline::PipelineMode;
use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("synthetic trajectories need at least two waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("station {id}: {reason}")]
    InvalidStation { id: u32, reason: &'static str },
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

/// A fixed radio base station with its range-noise statistics and LOS
/// schedule. An empty interval list means the station is always visible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub id: u32,
    /// Position in the global frame, meters.
    pub position: Vector3<f64>,
    /// Range noise standard deviation, meters.
    pub sigma_m: f64,
    /// Range noise mean (clock/hardware bias), meters.
    pub bias_m: f64,
    /// Active (line-of-sight) intervals `[start, end)`, seconds.
    #[serde(default)]
    pub intervals: Vec<(f64, f64)>,
}

impl BaseStation {
    pub fn new(id: u32, position: Vector3<f64>, sigma_m: f64, bias_m: f64) -> Self {
        Self {
            id,
            position,
            sigma_m,
            bias_m,
            intervals: Vec::new(),
        }
    }

    pub fn with_intervals(mut self, intervals: Vec<(f64, f64)>) -> Self {
        self.intervals = intervals;
        self
    }

    /// σ must be positive and intervals well-ordered (each start < end,
    /// sorted by start).
    pub fn validate(&self) -> Result<(), SimulateError> {
        if !(self.sigma_m > 0.0) {
            return Err(SimulateError::InvalidStation {
                id: self.id,
                reason: "sigma must be positive",
            });
        }
        let mut last_start = f64::NEG_INFINITY;
        for &(start, end) in &self.intervals {
            if !(start < end) {
                return Err(SimulateError::InvalidStation {
                    id: self.id,
                    reason: "interval start must precede its end",
                });
            }
            if start < last_start {
                return Err(SimulateError::InvalidStation {
                    id: self.id,
                    reason: "intervals must be sorted by start",
                });
            }
            last_start = start;
        }
        Ok(())
    }

    pub fn is_active(&self, time: f64) -> bool {
        self.intervals.is_empty()
            || self
                .intervals
                .iter()
                .any(|&(start, end)| time >= start && time < end)
    }
}

/// Gaussian perturbation applied to each consecutive-pose odometry step,
/// standing in for a visual(-inertial) front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryNoiseModel {
    /// Translation noise per step, meters.
    pub translation_sigma: f64,
    /// Rotation noise per step, radians.
    pub rotation_sigma: f64,
    /// Factor multiplying every step translation (1 = metric odometry;
    /// monocular front ends deliver an arbitrary, unknown factor).
    pub scale_drift: f64,
    /// When set, a slowly random-walking twist offset is added on top of the
    /// white per-step noise, emulating front-end drift that does not average
    /// out.
    pub random_walk_bias: bool,
}

impl Default for OdometryNoiseModel {
    fn default() -> Self {
        Self {
            translation_sigma: 0.0,
            rotation_sigma: 0.0,
            scale_drift: 1.0,
            random_walk_bias: false,
        }
    }
}

impl OdometryNoiseModel {
    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.translation_sigma < 0.0 || self.rotation_sigma < 0.0 {
            return Err(SimulateError::InvalidScenario(
                "odometry noise sigmas must be non-negative".into(),
            ));
        }
        if !(self.scale_drift > 0.0) {
            return Err(SimulateError::InvalidScenario(
                "odometry scale drift must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One odometry measurement: the relative transform between two consecutive
/// trajectory samples, as the front end reported it.
#[derive(Debug, Clone, PartialEq)]
pub struct OdometryStep {
    pub from_time: f64,
    pub to_time: f64,
    pub delta: RigidTransform,
}

/// One time-of-arrival range measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToaMeasurement {
    pub time: f64,
    pub station_id: u32,
    pub range_m: f64,
}

/// Axis-aligned flight volume the synthetic trajectory is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Default for BoundingBox {
    /// A 5×5×5 m netted flight volume centered above the origin.
    fn default() -> Self {
        Self {
            min: Vector3::new(-2.5, -2.5, 0.0),
            max: Vector3::new(2.5, 2.5, 5.0),
        }
    }
}

impl BoundingBox {
    fn clamp(&self, p: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }
}

/// Synthetic ground-truth trajectory specification: waypoints traversed at
/// constant waypoint-to-waypoint schedule over `duration` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrajectory {
    pub waypoints: Vec<Vector3<f64>>,
    pub duration: f64,
    pub rate_hz: f64,
    pub bounds: BoundingBox,
}

impl SyntheticTrajectory {
    pub fn new(waypoints: Vec<Vector3<f64>>, duration: f64, rate_hz: f64) -> Self {
        Self {
            waypoints,
            duration,
            rate_hz,
            bounds: BoundingBox::default(),
        }
    }
}

/// Catmull-Rom position interpolation through the waypoints (C¹), with yaw
/// following the horizontal velocity direction, sampled at the odometry
/// rate. Waypoints are clamped into the bounding box before interpolation.
pub fn generate_trajectory(spec: &SyntheticTrajectory) -> Result<Vec<TimedPose>, SimulateError> {
    if spec.waypoints.len() < 2 {
        return Err(SimulateError::TooFewWaypoints(spec.waypoints.len()));
    }
    assert!(spec.duration > 0.0, "duration must be positive");
    assert!(spec.rate_hz > 0.0, "rate must be positive");

    let pts: Vec<Vector3<f64>> = spec.waypoints.iter().map(|p| spec.bounds.clamp(p)).collect();
    let n_seg = pts.len() - 1;
    let seg_time = spec.duration / n_seg as f64;

    // duplicated endpoints give zero-curvature boundary tangents
    let control = |i: isize| -> Vector3<f64> {
        let i = i.clamp(0, (pts.len() - 1) as isize) as usize;
        pts[i]
    };

    let position = |t: f64| -> Vector3<f64> {
        let t = t.clamp(0.0, spec.duration);
        let seg = ((t / seg_time) as usize).min(n_seg - 1);
        let u = (t - seg as f64 * seg_time) / seg_time;
        let (p0, p1, p2, p3) = (
            control(seg as isize - 1),
            control(seg as isize),
            control(seg as isize + 1),
            control(seg as isize + 2),
        );
        let u2 = u * u;
        let u3 = u2 * u;
        0.5 * ((2.0 * u3 - 3.0 * u2 + 1.0) * 2.0 * p1
            + (u3 - 2.0 * u2 + u) * (p2 - p0)
            + (-2.0 * u3 + 3.0 * u2) * 2.0 * p2
            + (u3 - u2) * (p3 - p1))
    };

    let dt = 1.0 / spec.rate_hz;
    let steps = (spec.duration * spec.rate_hz).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut yaw = 0.0f64;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let p = position(t);
        // forward difference for the heading; hold yaw when hovering
        let v = (position(t + 1e-4) - position(t - 1e-4)) / 2e-4;
        let horizontal = (v.x * v.x + v.y * v.y).sqrt();
        if horizontal > 1e-3 {
            yaw = v.y.atan2(v.x);
        }
        let rotation = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, yaw));
        out.push(TimedPose::new(t, RigidTransform::new(rotation, p)));
    }
    Ok(out)
}

/// Per-step standard deviation of the random-walk increments, as a fraction
/// of the white per-step σ.
const WALK_INCREMENT_RATIO: f64 = 0.01;

/// Turn a ground-truth trajectory into the relative-pose stream a front end
/// would report: each step perturbed by Gaussian tangent noise and its
/// translation multiplied by the scale drift factor.
pub fn corrupt_odometry(
    ground_truth: &[TimedPose],
    model: &OdometryNoiseModel,
    seed: u64,
) -> Vec<OdometryStep> {
    model.validate().expect("invalid odometry noise model");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut walk = Twist::zero();
    let mut out = Vec::with_capacity(ground_truth.len().saturating_sub(1));
    for pair in ground_truth.windows(2) {
        let delta = pair[0].pose.inverse().compose(&pair[1].pose);
        let mut xi = Twist::new(
            Vector3::from_fn(|_, _| normal.sample(&mut rng) * model.rotation_sigma),
            Vector3::from_fn(|_, _| normal.sample(&mut rng) * model.translation_sigma),
        );
        if model.random_walk_bias {
            // The walking offset is integrated into every subsequent step, so
            // its per-step increments must stay well below the white noise
            // (the summed walk grows as N^1.5 against the white √N).
            walk.rot += Vector3::from_fn(|_, _| {
                normal.sample(&mut rng) * model.rotation_sigma * WALK_INCREMENT_RATIO
            });
            walk.trans += Vector3::from_fn(|_, _| {
                normal.sample(&mut rng) * model.translation_sigma * WALK_INCREMENT_RATIO
            });
            xi.rot += walk.rot;
            xi.trans += walk.trans;
        }
        let noisy = delta.compose(&RigidTransform::exp(&xi));
        let scaled = RigidTransform::new(noisy.rotation(), noisy.translation() * model.scale_drift);
        out.push(OdometryStep {
            from_time: pair[0].time,
            to_time: pair[1].time,
            delta: scaled,
        });
    }
    out
}

/// Ground-truth position at `t`, linearly interpolated between samples.
fn position_at(ground_truth: &[TimedPose], t: f64) -> Vector3<f64> {
    let first = ground_truth.first().expect("non-empty trajectory");
    let last = ground_truth.last().unwrap();
    if t <= first.time {
        return first.pose.translation();
    }
    if t >= last.time {
        return last.pose.translation();
    }
    let idx = ground_truth.partition_point(|p| p.time <= t);
    let (a, b) = (&ground_truth[idx - 1], &ground_truth[idx]);
    let alpha = (t - a.time) / (b.time - a.time);
    a.pose.translation() * (1.0 - alpha) + b.pose.translation() * alpha
}

/// Generate per-station range streams on the ToA rate grid and merge them by
/// timestamp (ties broken by station id). Draws that would produce a
/// non-positive range are redrawn rather than clamped, so the emitted noise
/// stays Gaussian over the configured geometries.
pub fn simulate_toa(
    ground_truth: &[TimedPose],
    stations: &[BaseStation],
    toa_rate_hz: f64,
    seed: u64,
) -> Vec<ToaMeasurement> {
    assert!(!stations.is_empty(), "need at least one station");
    assert!(toa_rate_hz > 0.0, "rate must be positive");
    assert!(!ground_truth.is_empty(), "need a trajectory");
    for s in stations {
        s.validate().expect("invalid station");
    }
    let t_end = ground_truth.last().unwrap().time;
    let dt = 1.0 / toa_rate_hz;
    let steps = (t_end * toa_rate_hz).floor() as usize;

    let mut out = Vec::new();
    for station in stations {
        let mut rng = station_rng(seed, station.id);
        let normal = Normal::new(station.bias_m, station.sigma_m).unwrap();
        for k in 0..=steps {
            let t = k as f64 * dt;
            if !station.is_active(t) {
                continue;
            }
            let true_range = (position_at(ground_truth, t) - station.position).norm();
            let mut measured = true_range + normal.sample(&mut rng);
            let mut attempts = 0;
            while measured <= 0.0 {
                attempts += 1;
                assert!(
                    attempts < 1000,
                    "station {} sits inside the noise reach of the path",
                    station.id
                );
                measured = true_range + normal.sample(&mut rng);
            }
            out.push(ToaMeasurement {
                time: t,
                station_id: station.id,
                range_m: measured,
            });
        }
    }
    out.sort_by(|a, b| {
        a.time
            .total_cmp(&b.time)
            .then(a.station_id.cmp(&b.station_id))
    });
    out
}

/// Independent, stable generator for one station's noise stream.
fn station_rng(seed: u64, station_id: u32) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&station_id.to_le_bytes());
    key[12] = 0x5a;
    ChaCha12Rng::from_seed(key)
}

/// Noise-statistics presets for the two simulated carrier frequencies.
/// Values are drawn once per station from the envelope of the reported
/// per-station statistics; explicit per-station overrides take precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyPreset {
    /// 200 MHz bandwidth class: σ ∈ [27.6, 41.3] cm, bias ∈ [−19.4, +8.3] cm.
    Ghz28,
    /// 400 MHz bandwidth class: σ ∈ [14.2, 19.6] cm, bias ∈ [−8.7, +3.1] cm.
    Ghz78,
}

impl FrequencyPreset {
    pub fn sigma_range_m(&self) -> (f64, f64) {
        match self {
            FrequencyPreset::Ghz28 => (0.276, 0.413),
            FrequencyPreset::Ghz78 => (0.142, 0.196),
        }
    }

    pub fn bias_range_m(&self) -> (f64, f64) {
        match self {
            FrequencyPreset::Ghz28 => (-0.194, 0.083),
            FrequencyPreset::Ghz78 => (-0.087, 0.031),
        }
    }

    /// Draw per-station (σ, bias) pairs deterministically from the preset
    /// envelope.
    pub fn draw_noise(&self, station_id: u32, seed: u64) -> (f64, f64) {
        let mut rng = station_rng(seed ^ 0x70f0_7e5e, station_id);
        let (s_lo, s_hi) = self.sigma_range_m();
        let (b_lo, b_hi) = self.bias_range_m();
        (rng.gen_range(s_lo..s_hi), rng.gen_range(b_lo..b_hi))
    }
}

/// Complete scenario description, loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub trajectory: TrajectorySource,
    pub duration_s: f64,
    #[serde(default = "default_odometry_rate")]
    pub odometry_rate_hz: f64,
    #[serde(default = "default_toa_rate")]
    pub toa_rate_hz: f64,
    #[serde(default)]
    pub frequency: Option<FrequencyPreset>,
    pub stations: Vec<StationConfig>,
    #[serde(default)]
    pub odometry: OdometryNoiseModel,
    pub mode: PipelineMode,
    pub seed: u64,
}

fn default_odometry_rate() -> f64 {
    20.0
}

fn default_toa_rate() -> f64 {
    10.0
}

/// Where the ground-truth trajectory comes from: inline waypoints or a
/// TUM-format file. Exactly one must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub waypoints: Option<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<std::path::PathBuf>,
}

/// Station entry in a scenario file; σ and bias fall back to the frequency
/// preset when omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationConfig {
    pub id: u32,
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub intervals: Vec<(f64, f64)>,
}

impl ScenarioConfig {
    /// Resolve station entries against the frequency preset into fully
    /// specified base stations.
    pub fn resolve_stations(&self) -> Result<Vec<BaseStation>, SimulateError> {
        let mut out = Vec::with_capacity(self.stations.len());
        for sc in &self.stations {
            let (preset_sigma, preset_bias) = match self.frequency {
                Some(preset) => preset.draw_noise(sc.id, self.seed),
                None => (f64::NAN, f64::NAN),
            };
            let sigma = sc.sigma_m.unwrap_or(preset_sigma);
            let bias = sc.bias_m.unwrap_or(preset_bias);
            if !sigma.is_finite() || !bias.is_finite() {
                return Err(SimulateError::InvalidScenario(format!(
                    "station {} needs sigma_m/bias_m or a frequency preset",
                    sc.id
                )));
            }
            let station = BaseStation {
                id: sc.id,
                position: Vector3::from_column_slice(&sc.position),
                sigma_m: sigma,
                bias_m: bias,
                intervals: sc.intervals.clone(),
            };
            station.validate()?;
            out.push(station);
        }
        if out.is_empty() {
            return Err(SimulateError::InvalidScenario(
                "at least one station required".into(),
            ));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        if !(self.duration_s > 0.0) {
            return Err(SimulateError::InvalidScenario(
                "duration must be positive".into(),
            ));
        }
        if !(self.odometry_rate_hz > 0.0) || !(self.toa_rate_hz > 0.0) {
            return Err(SimulateError::InvalidScenario(
                "rates must be positive".into(),
            ));
        }
        match (&self.trajectory.waypoints, &self.trajectory.file) {
            (Some(w), None) if w.len() >= 2 => {}
            (Some(_), None) => {
                return Err(SimulateError::InvalidScenario(
                    "need at least two waypoints".into(),
                ))
            }
            (None, Some(_)) => {}
            _ => {
                return Err(SimulateError::InvalidScenario(
                    "trajectory needs exactly one of `waypoints` or `file`".into(),
                ))
            }
        }
        self.odometry.validate()?;
        self.resolve_stations().map(|_| ())
    }
}
