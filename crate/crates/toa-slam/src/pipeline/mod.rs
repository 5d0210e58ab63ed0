//! The estimation back end: consumes an odometry stream and a range stream,
//! maintains the factor graph over keyframe poses, the local-to-global
//! transform, per-station range biases, and (in monocular mode) the global
//! scale, and exposes the individual optimization routines the back end is
//! built from.
//!
//! The [`Backend`] can be driven keyframe by keyframe for fine-grained
//! control; [`run_backend`] wires the standard schedule on top of it:
//! a tracking step per keyframe, a sliding-window refinement every
//! `window_size` keyframes, and a full global refinement (followed by
//! transform and, in monocular mode, scale refinement) whenever any of the
//! four trigger conditions fires.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::factors::{toa_residual, RelativePoseFactor, ToaFactor};
use crate::geometry::{RigidTransform, TimedPose, Twist, DEFAULT_ASSOCIATION_WINDOW};
use crate::graph::{
    FactorEdge, FactorError, FactorKey, Graph, GraphError, OptimizeReport, OptimizeSettings,
    RobustKernel, Value, VariableKey,
};
use crate::simulate::{OdometryStep, ScenarioConfig, SimulateError, ToaMeasurement};

/// Huber transition point (in units of whitened residual) for range factors.
const TOA_HUBER_DELTA: f64 = 3.0;
/// Ground-truth distance below which a revisited keyframe produces a
/// loop-closure candidate.
const LOOP_CLOSURE_DISTANCE_M: f64 = 0.3;
/// Loop-closure measurement noise: 1 cm translation per axis.
const LOOP_CLOSURE_TRANS_SIGMA: f64 = 0.01;
/// Loop-closure measurement noise: 0.5 degrees per rotation axis.
const LOOP_CLOSURE_ROT_SIGMA: f64 = 0.5 * std::f64::consts::PI / 180.0;
/// Lower bound applied to odometry edge sigmas so noiseless runs still yield
/// a finite information matrix.
const ODOMETRY_SIGMA_FLOOR: f64 = 1e-4;
/// 1-sigma of the first keyframe's gauge prior (meters / radians).
const FIRST_POSE_PRIOR_SIGMA: f64 = 1e-3;
/// Relative eigenvalue ratio below which the linear station-initialization
/// system is treated as ill conditioned and initialization is deferred.
const TRILATERATION_CONDITION_RATIO: f64 = 1e-6;

/// What the odometry front end provides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    /// Metric odometry (RGB-D / stereo class): scale fixed at 1.
    RangeScaled,
    /// Scale-ambiguous odometry: the global scale is estimated.
    Monocular,
}

/// Whether station positions are surveyed or must be estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationMode {
    /// Station positions fixed; the local-to-global transform is estimated.
    Known,
    /// Station positions estimated; the local-to-global transform stays
    /// fixed to remove the gauge freedom between the two.
    Unknown,
}

/// Operating mode of the back end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineMode {
    pub sensor: SensorMode,
    pub stations: StationMode,
    pub loop_closure: bool,
}

impl PipelineMode {
    pub fn range_scaled_known() -> Self {
        Self {
            sensor: SensorMode::RangeScaled,
            stations: StationMode::Known,
            loop_closure: false,
        }
    }

    pub fn monocular_known() -> Self {
        Self {
            sensor: SensorMode::Monocular,
            stations: StationMode::Known,
            loop_closure: false,
        }
    }

    pub fn monocular_unknown() -> Self {
        Self {
            sensor: SensorMode::Monocular,
            stations: StationMode::Unknown,
            loop_closure: false,
        }
    }

    pub fn with_loop_closure(mut self, enabled: bool) -> Self {
        self.loop_closure = enabled;
        self
    }
}

/// Back-end failure modes.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    /// The odometry stream holds no steps at all.
    #[error("odometry stream is empty")]
    EmptyStream,
    /// A timestamp went backwards (or a step had non-positive duration).
    #[error("timestamps must not decrease: {0}")]
    NonMonotonicTimestamps(String),
    /// A refinement that only makes sense with range data was requested
    /// before any range factor entered the graph.
    #[error("no range factors in the graph yet")]
    NoToaFactors,
    /// Scale refinement was requested on a metric-odometry back end.
    #[error("scale refinement requires monocular mode")]
    NotMonocular,
    /// A measurement referenced a station id that was never configured.
    #[error("station {0} appears in the range stream but is not configured")]
    UnknownStation(u32),
    /// Known-station mode requires a surveyed position for every station.
    #[error("station {0} needs a surveyed position in known-station mode")]
    MissingPosition(u32),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Factor(#[from] FactorError),
    #[error(transparent)]
    Scenario(#[from] SimulateError),
}

/// Thresholds of the four OR-combined global-refinement trigger conditions.
/// A condition fires on a strict `>` comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerThresholds {
    /// Largest |residual|/sigma over the newest keyframe's range factors.
    pub max_normalized_residual: f64,
    /// Translation accumulated since the last global refinement, meters.
    pub accumulated_motion_m: f64,
    /// Time since the last global refinement, seconds.
    pub elapsed_s: f64,
    /// Keyframes added since the last global refinement.
    pub keyframes: usize,
}

impl Default for TriggerThresholds {
    fn default() -> Self {
        Self {
            max_normalized_residual: 3.0,
            accumulated_motion_m: 5.0,
            elapsed_s: 10.0,
            keyframes: 20,
        }
    }
}

/// Running statistics compared against [`TriggerThresholds`]; reset after
/// every global refinement.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RefinementTriggerState {
    pub max_normalized_residual: f64,
    pub accumulated_motion_m: f64,
    pub elapsed_s: f64,
    pub keyframes_added: usize,
}

/// True when any of the four trigger conditions strictly exceeds its
/// threshold.
pub fn should_trigger_global_refinement(
    state: &RefinementTriggerState,
    thresholds: &TriggerThresholds,
) -> bool {
    state.max_normalized_residual > thresholds.max_normalized_residual
        || state.accumulated_motion_m > thresholds.accumulated_motion_m
        || state.elapsed_s > thresholds.elapsed_s
        || state.keyframes_added > thresholds.keyframes
}

/// One ranging station as the back end sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub id: u32,
    /// 1-sigma range noise used to weight this station's factors, meters.
    pub sigma_m: f64,
    /// Surveyed global position. `None` defers the station to on-line
    /// initialization, which requires [`StationMode::Unknown`].
    pub position: Option<Vector3<f64>>,
}

/// Tuning knobs of the back end.
#[derive(Debug, Clone)]
pub struct BackendConfig {
    /// Odometry steps folded into one keyframe interval.
    pub keyframe_stride: usize,
    /// Keyframes jointly refined by a sliding-window refinement.
    pub window_size: usize,
    pub thresholds: TriggerThresholds,
    /// Initial value of the local-to-global transform. In unknown-station
    /// mode this value stays fixed and defines the global frame.
    pub t_go_init: RigidTransform,
    /// 1-sigma translation noise of one keyframe-to-keyframe odometry
    /// measurement, meters.
    pub odometry_translation_sigma: f64,
    /// 1-sigma rotation noise of one keyframe-to-keyframe odometry
    /// measurement, radians.
    pub odometry_rotation_sigma: f64,
    pub stations: Vec<StationSpec>,
    /// Half-width of the window matching range timestamps to keyframe
    /// timestamps, seconds.
    pub toa_association_window: f64,
    /// Range observations a station must park before on-line initialization
    /// is attempted.
    pub min_station_observations: usize,
    /// Zero-mean prior sigma on every station clock bias, meters. Clock
    /// error is centimeter-scale; the weak anchor keeps sparse early data
    /// from paying for transform or pose error with meter-scale biases.
    pub bias_prior_sigma_m: f64,
    /// Range factors that must exist (attached or parked) before frozen
    /// calibration is considered identifiable.
    pub calibration_min_factors: usize,
    /// Trajectory motion that must accumulate before frozen calibration is
    /// considered identifiable, meters. Ranges from a near-stationary
    /// receiver cannot separate the transform from the biases.
    pub calibration_min_motion_m: f64,
    /// Ground-truth trajectory (metric) used by the simulated place
    /// recognition that proposes loop closures. `None` disables closures
    /// even when the mode asks for them.
    pub loop_closure_truth: Option<Vec<TimedPose>>,
    /// Seed of the loop-closure measurement noise stream.
    pub loop_closure_seed: u64,
    pub settings: OptimizeSettings,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            keyframe_stride: 10,
            window_size: 10,
            thresholds: TriggerThresholds::default(),
            t_go_init: RigidTransform::identity(),
            odometry_translation_sigma: 0.02,
            odometry_rotation_sigma: 0.005,
            stations: Vec::new(),
            toa_association_window: DEFAULT_ASSOCIATION_WINDOW,
            min_station_observations: 8,
            bias_prior_sigma_m: 0.3,
            calibration_min_factors: 40,
            calibration_min_motion_m: 2.0,
            loop_closure_truth: None,
            loop_closure_seed: 0,
            settings: OptimizeSettings::default(),
        }
    }
}

impl BackendConfig {
    /// Keyframe-interval sigma from a per-step sigma: the stride steps add
    /// independent noise, so the variance scales with the stride. Floored so
    /// noiseless scenarios still produce a finite information matrix.
    pub fn keyframe_sigma(step_sigma: f64, stride: usize) -> f64 {
        (step_sigma * (stride as f64).sqrt()).max(ODOMETRY_SIGMA_FLOOR)
    }

    /// Derive a configuration from a simulation scenario: stations with
    /// their noise levels resolved, and odometry edge sigmas scaled from the
    /// per-step noise model to the keyframe stride.
    pub fn from_scenario(scenario: &ScenarioConfig) -> Result<Self, PipelineError> {
        let mut config = Self::default();
        let known = scenario.mode.stations == StationMode::Known;
        config.stations = scenario
            .resolve_stations()?
            .into_iter()
            .map(|s| StationSpec {
                id: s.id,
                sigma_m: s.sigma_m,
                position: known.then_some(s.position),
            })
            .collect();
        config.odometry_translation_sigma =
            Self::keyframe_sigma(scenario.odometry.translation_sigma, config.keyframe_stride);
        config.odometry_rotation_sigma =
            Self::keyframe_sigma(scenario.odometry.rotation_sigma, config.keyframe_stride);
        Ok(config)
    }
}

/// The back end's current answer.
#[derive(Debug, Clone)]
pub struct BackendEstimate {
    /// Keyframe poses in the local (odometry) frame, current map scale.
    pub keyframes: Vec<TimedPose>,
    /// Local-to-global transform.
    pub t_go: RigidTransform,
    /// Cumulative scale mapping raw odometry translations to global metric
    /// units (product of every propagated refinement and the live estimate).
    pub scale: f64,
    /// Per-station range bias estimates, meters.
    pub biases: BTreeMap<u32, f64>,
    /// Station positions in the global frame. Surveyed stations echo their
    /// input; unknown stations appear once initialized.
    pub stations: BTreeMap<u32, Vector3<f64>>,
    /// Keyframe poses mapped to the global metric frame.
    pub global_trajectory: Vec<TimedPose>,
}

/// Map a local pose to the global metric frame: rotation composed with the
/// transform, translation additionally scaled.
pub fn global_pose(t_go: &RigidTransform, scale: f64, local: &RigidTransform) -> RigidTransform {
    let composed = t_go.compose(local);
    RigidTransform::new(composed.rotation(), scale * composed.translation())
}

/// Restrict a range stream to a per-station visibility schedule: a
/// measurement survives when its station appears in the schedule and its
/// timestamp falls inside one of the station's `[start, end)` intervals.
/// Stations absent from the schedule are dropped entirely.
pub fn apply_visibility_schedule(
    measurements: &[ToaMeasurement],
    schedule: &[(u32, Vec<(f64, f64)>)],
) -> Vec<ToaMeasurement> {
    measurements
        .iter()
        .filter(|m| {
            schedule.iter().any(|(id, intervals)| {
                *id == m.station_id
                    && intervals
                        .iter()
                        .any(|&(start, end)| m.time >= start && m.time < end)
            })
        })
        .copied()
        .collect()
}

struct KeyframeRecord {
    key: VariableKey,
    time: f64,
}

/// Bookkeeping for every relative-pose edge so scale propagation can rewrite
/// measurements and weights in place.
struct RelativeRecord {
    factor: FactorKey,
    from: VariableKey,
    to: VariableKey,
    measured: RigidTransform,
    sigma_rot: f64,
    sigma_trans: f64,
    kernel: RobustKernel,
}

struct StationState {
    spec: StationSpec,
    position_key: Option<VariableKey>,
    bias_key: Option<VariableKey>,
    factor_count: usize,
    /// (keyframe index, measured range) pairs waiting for initialization.
    parked: Vec<(usize, f64)>,
}

/// The incremental estimation engine. Owns the factor graph plus the
/// bookkeeping needed to drive the five optimization routines.
pub struct Backend {
    mode: PipelineMode,
    config: BackendConfig,
    graph: Graph,
    keyframes: Vec<KeyframeRecord>,
    relative_factors: Vec<RelativeRecord>,
    t_go_key: VariableKey,
    scale_key: Option<VariableKey>,
    stations: BTreeMap<u32, StationState>,
    toa_factor_count: usize,
    /// Ranges of initialized stations received while calibration was
    /// frozen, waiting to become factors: (keyframe index, station, range).
    pending_toa: Vec<(usize, u32, f64)>,
    /// While set, the transform and biases are withheld from every
    /// refinement and incoming ranges are parked in `pending_toa`.
    calibration_frozen: bool,
    /// Translation accumulated over the whole run; never reset.
    total_motion_m: f64,
    trigger: RefinementTriggerState,
    last_refinement_time: f64,
    /// Correction applied to incoming odometry translations after scale
    /// propagation re-expressed the map in new units.
    incoming_scale: f64,
    /// Composed (already corrected) delta of the previous tracking step,
    /// for building the skip-one covisibility edge.
    last_delta: Option<RigidTransform>,
    lc_rng: ChaCha12Rng,
}

impl Backend {
    /// Start a back end with its first keyframe pinned at the identity at
    /// `start_time`. `initial_toa` carries the range measurements associated
    /// with that first keyframe.
    pub fn new(
        mode: PipelineMode,
        config: BackendConfig,
        start_time: f64,
        initial_toa: &[ToaMeasurement],
    ) -> Result<Self, PipelineError> {
        let mut graph = Graph::new();

        let first = graph.add_variable(Value::Pose(RigidTransform::identity()), false)?;
        let gauge_info =
            DMatrix::identity(6, 6) / (FIRST_POSE_PRIOR_SIGMA * FIRST_POSE_PRIOR_SIGMA);
        graph.set_prior_information(first, gauge_info);

        let t_go_fixed = mode.stations == StationMode::Unknown;
        let t_go_key = graph.add_variable(Value::Transform(config.t_go_init.clone()), t_go_fixed)?;

        let scale_key = match mode.sensor {
            SensorMode::Monocular => Some(graph.add_variable(Value::Scale(1.0), false)?),
            SensorMode::RangeScaled => None,
        };

        let mut stations = BTreeMap::new();
        for spec in &config.stations {
            let (position_key, bias_key) = match (&spec.position, mode.stations) {
                (Some(p), StationMode::Known) => {
                    let pos = graph.add_variable(Value::StationPosition(*p), true)?;
                    let bias = add_bias_variable(&mut graph, config.bias_prior_sigma_m)?;
                    (Some(pos), Some(bias))
                }
                (Some(p), StationMode::Unknown) => {
                    let pos = graph.add_variable(Value::StationPosition(*p), false)?;
                    let bias = add_bias_variable(&mut graph, config.bias_prior_sigma_m)?;
                    (Some(pos), Some(bias))
                }
                (None, StationMode::Unknown) => (None, None),
                (None, StationMode::Known) => {
                    return Err(PipelineError::MissingPosition(spec.id));
                }
            };
            stations.insert(
                spec.id,
                StationState {
                    spec: spec.clone(),
                    position_key,
                    bias_key,
                    factor_count: 0,
                    parked: Vec::new(),
                },
            );
        }

        let lc_rng = ChaCha12Rng::seed_from_u64(config.loop_closure_seed);
        let mut backend = Self {
            mode,
            config,
            graph,
            keyframes: vec![KeyframeRecord {
                key: first,
                time: start_time,
            }],
            relative_factors: Vec::new(),
            t_go_key,
            scale_key,
            stations,
            toa_factor_count: 0,
            pending_toa: Vec::new(),
            calibration_frozen: false,
            total_motion_m: 0.0,
            trigger: RefinementTriggerState::default(),
            last_refinement_time: start_time,
            incoming_scale: 1.0,
            last_delta: None,
            lc_rng,
        };
        backend.add_toa_factors(0, initial_toa)?;
        Ok(backend)
    }

    pub fn mode(&self) -> PipelineMode {
        self.mode
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn toa_factor_count(&self) -> usize {
        self.toa_factor_count
    }

    pub fn trigger_state(&self) -> &RefinementTriggerState {
        &self.trigger
    }

    /// Clear the trigger statistics after a global refinement at `time`.
    pub fn reset_triggers(&mut self, time: f64) {
        self.trigger = RefinementTriggerState::default();
        self.last_refinement_time = time;
    }

    /// Withhold the transform and biases from every refinement, parking
    /// incoming ranges instead of turning them into factors. Freezing at
    /// start-up keeps an unconverged transform from being refit against a
    /// handful of ranges, which overfits calibration and warps the map.
    /// Unfreezing attaches every parked range factor.
    pub fn set_calibration_frozen(&mut self, frozen: bool) {
        if self.calibration_frozen && !frozen {
            let pending = std::mem::take(&mut self.pending_toa);
            for (kf_index, station_id, range_m) in pending {
                self.attach_toa_factor(kf_index, station_id, range_m);
            }
        }
        self.calibration_frozen = frozen;
    }

    pub fn calibration_frozen(&self) -> bool {
        self.calibration_frozen
    }

    /// Whether enough ranging data and motion exist to identify the
    /// transform and the biases jointly.
    pub fn calibration_ready(&self) -> bool {
        self.toa_factor_count + self.pending_toa.len() >= self.config.calibration_min_factors
            && self.total_motion_m >= self.config.calibration_min_motion_m
    }

    pub fn t_go(&self) -> RigidTransform {
        self.graph.value(self.t_go_key).as_pose().clone()
    }

    /// Live scale variable (1 in metric mode).
    pub fn map_scale(&self) -> f64 {
        self.scale_key
            .map_or(1.0, |k| self.graph.value(k).as_scalar())
    }

    /// Cumulative odometry-to-metric scale including propagated refinements.
    pub fn recovered_scale(&self) -> f64 {
        self.incoming_scale * self.map_scale()
    }

    pub fn bias(&self, station_id: u32) -> Option<f64> {
        let st = self.stations.get(&station_id)?;
        st.bias_key.map(|k| self.graph.value(k).as_scalar())
    }

    /// Current global-frame estimate of a station position (`None` until an
    /// unknown station is initialized).
    pub fn station_position(&self, station_id: u32) -> Option<Vector3<f64>> {
        let st = self.stations.get(&station_id)?;
        st.position_key.map(|k| *self.graph.value(k).as_point())
    }

    pub fn is_station_initialized(&self, station_id: u32) -> bool {
        self.stations
            .get(&station_id)
            .is_some_and(|st| st.position_key.is_some())
    }

    /// Keyframe pose in the local frame.
    pub fn keyframe(&self, index: usize) -> TimedPose {
        let kf = &self.keyframes[index];
        TimedPose::new(kf.time, self.graph.value(kf.key).as_pose().clone())
    }

    /// The pose key of keyframe `index` (for custom optimizations and
    /// audits).
    pub fn keyframe_key(&self, index: usize) -> VariableKey {
        self.keyframes[index].key
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Add the next keyframe: extends the chain with an odometry edge, a
    /// skip-one covisibility edge, an optional loop-closure edge, and the
    /// keyframe's range factors, then optimizes only the new pose.
    pub fn tracking_pose_step(
        &mut self,
        time: f64,
        odometry: &RigidTransform,
        toa: &[ToaMeasurement],
    ) -> Result<OptimizeReport, PipelineError> {
        let prev = self.keyframes.last().expect("first keyframe always exists");
        let (prev_key, prev_time) = (prev.key, prev.time);
        if time <= prev_time {
            return Err(PipelineError::NonMonotonicTimestamps(format!(
                "keyframe at t={time} does not follow t={prev_time}"
            )));
        }

        // Re-express the incoming delta in the map's current units.
        let delta = RigidTransform::new(
            odometry.rotation(),
            self.incoming_scale * odometry.translation(),
        );

        let init = self.graph.value(prev_key).as_pose().compose(&delta);
        let key = self.graph.add_variable(Value::Pose(init), false)?;
        self.keyframes.push(KeyframeRecord { key, time });
        let kf_index = self.keyframes.len() - 1;

        self.add_relative_factor(
            prev_key,
            key,
            delta.clone(),
            self.config.odometry_rotation_sigma,
            self.config.odometry_translation_sigma,
            RobustKernel::None,
        );

        // Covisibility edge across two keyframes, composed from the stored
        // previous delta; downweighted relative to the direct edges.
        if let Some(prev_delta) = self.last_delta.take() {
            let skip = prev_delta.compose(&delta);
            let grandparent = self.keyframes[kf_index - 2].key;
            self.add_relative_factor(
                grandparent,
                key,
                skip,
                2.0 * self.config.odometry_rotation_sigma,
                2.0 * self.config.odometry_translation_sigma,
                RobustKernel::None,
            );
        }
        self.last_delta = Some(delta.clone());

        if self.mode.loop_closure {
            self.maybe_close_loop(kf_index);
        }

        let attached = self.add_toa_factors(kf_index, toa)?;

        let report = self.graph.optimize_subset(&[key], &self.config.settings)?;

        self.trigger.keyframes_added += 1;
        self.trigger.accumulated_motion_m += delta.translation().norm();
        self.total_motion_m += delta.translation().norm();
        self.trigger.elapsed_s = time - self.last_refinement_time;
        for m in &attached {
            let r = self.normalized_toa_residual(key, m.station_id, m.range_m);
            if r > self.trigger.max_normalized_residual {
                self.trigger.max_normalized_residual = r;
            }
        }

        Ok(report)
    }

    /// Jointly refine the last `window_size` keyframes (older poses stay
    /// fixed) together with the transform (known-station mode), the observed
    /// biases, and initialized station positions (unknown-station mode).
    pub fn local_window_refinement(&mut self) -> Result<OptimizeReport, PipelineError> {
        assert!(
            self.keyframes.len() >= 2,
            "window refinement needs at least two keyframes"
        );
        let start = self.keyframes.len().saturating_sub(self.config.window_size);
        let mut free: Vec<VariableKey> =
            self.keyframes[start..].iter().map(|kf| kf.key).collect();
        self.extend_with_calibration(&mut free, self.mode.stations == StationMode::Unknown);
        Ok(self.graph.optimize_subset(&free, &self.config.settings)?)
    }

    /// Refine every keyframe pose together with the transform
    /// (known-station mode), the observed biases, and station positions
    /// (unknown-station mode).
    pub fn global_map_refinement(&mut self) -> Result<OptimizeReport, PipelineError> {
        assert!(
            self.keyframes.len() >= 2,
            "global refinement needs at least two keyframes"
        );
        let mut free: Vec<VariableKey> = self.keyframes.iter().map(|kf| kf.key).collect();
        self.extend_with_calibration(&mut free, self.mode.stations == StationMode::Unknown);
        Ok(self.graph.optimize_subset(&free, &self.config.settings)?)
    }

    /// Re-estimate calibration against the ranges with every pose fixed:
    /// the local-to-global transform and observed biases when stations are
    /// surveyed; station positions and biases when they are estimated (the
    /// transform then never moves).
    pub fn transformation_refinement(&mut self) -> Result<OptimizeReport, PipelineError> {
        if self.toa_factor_count == 0 {
            return Err(PipelineError::NoToaFactors);
        }
        let mut free = Vec::new();
        self.extend_with_calibration(&mut free, self.mode.stations == StationMode::Unknown);
        if free.is_empty() {
            // Frozen calibration: nothing may move.
            return Err(PipelineError::NoToaFactors);
        }
        Ok(self.graph.optimize_subset(&free, &self.config.settings)?)
    }

    /// Re-estimate the global scale (with the rest of the calibration:
    /// transform and biases, plus estimated station positions) against the
    /// range factors, then propagate: keyframe translations and the
    /// transform translation are multiplied by the recovered scale, every
    /// relative-pose measurement is re-expressed in the new units, and the
    /// scale variable resets to 1. The global-frame estimate is invariant
    /// under the propagation.
    pub fn scale_refinement(&mut self) -> Result<OptimizeReport, PipelineError> {
        let scale_key = self.scale_key.ok_or(PipelineError::NotMonocular)?;
        if self.toa_factor_count == 0 {
            return Err(PipelineError::NoToaFactors);
        }
        let mut free = vec![scale_key];
        self.extend_with_calibration(&mut free, self.mode.stations == StationMode::Unknown);
        let report = self.graph.optimize_subset(&free, &self.config.settings)?;
        self.propagate_scale()?;
        Ok(report)
    }

    /// The back end's current answer.
    pub fn estimate(&self) -> BackendEstimate {
        let t_go = self.t_go();
        let scale = self.map_scale();
        let keyframes: Vec<TimedPose> = self
            .keyframes
            .iter()
            .map(|kf| TimedPose::new(kf.time, self.graph.value(kf.key).as_pose().clone()))
            .collect();
        let global_trajectory = keyframes
            .iter()
            .map(|tp| TimedPose::new(tp.time, global_pose(&t_go, scale, &tp.pose)))
            .collect();
        let mut biases = BTreeMap::new();
        let mut stations = BTreeMap::new();
        for (id, st) in &self.stations {
            if let Some(k) = st.bias_key {
                biases.insert(*id, self.graph.value(k).as_scalar());
            }
            if let Some(k) = st.position_key {
                stations.insert(*id, *self.graph.value(k).as_point());
            }
        }
        BackendEstimate {
            keyframes,
            t_go,
            scale: self.recovered_scale(),
            biases,
            stations,
            global_trajectory,
        }
    }

    /// Gauss-Newton information accumulated on the transform by the factors
    /// that touch it, at the current estimate. Near-zero diagonal entries
    /// expose directions the range geometry does not constrain.
    pub fn transform_information(&self) -> Result<DMatrix<f64>, PipelineError> {
        let mut info = DMatrix::zeros(6, 6);
        let mut values: Vec<Value> = Vec::new();
        for edge in self.graph.edges() {
            let vars = edge.residual_fn().variables();
            let Some(slot) = vars.iter().position(|&k| k == self.t_go_key) else {
                continue;
            };
            values.clear();
            values.extend(vars.iter().map(|&k| self.graph.value(k).clone()));
            let (e, jacobians) = edge.residual_fn().residual_and_jacobians(&values)?;
            let sq = (e.transpose() * edge.information() * &e)[(0, 0)];
            let w = edge.kernel().weight(sq);
            let j = &jacobians[slot];
            info += w * j.transpose() * edge.information() * j;
        }
        Ok(info)
    }

    /// Free calibration variables shared by the refinements: the transform
    /// when it is estimated (known-station mode), every observed bias, and —
    /// when `with_stations` — the initialized station positions. Nothing is
    /// freed while calibration is frozen.
    fn extend_with_calibration(&self, free: &mut Vec<VariableKey>, with_stations: bool) {
        if self.calibration_frozen {
            return;
        }
        if self.mode.stations == StationMode::Known {
            free.push(self.t_go_key);
        }
        for st in self.stations.values() {
            if st.factor_count == 0 {
                continue;
            }
            if let Some(bias) = st.bias_key {
                free.push(bias);
            }
            if with_stations {
                if let Some(pos) = st.position_key {
                    free.push(pos);
                }
            }
        }
    }

    fn add_relative_factor(
        &mut self,
        from: VariableKey,
        to: VariableKey,
        measured: RigidTransform,
        sigma_rot: f64,
        sigma_trans: f64,
        kernel: RobustKernel,
    ) {
        let edge = relative_edge(from, to, &measured, sigma_rot, sigma_trans, kernel);
        let factor = self.graph.add_factor(edge);
        self.relative_factors.push(RelativeRecord {
            factor,
            from,
            to,
            measured,
            sigma_rot,
            sigma_trans,
            kernel,
        });
    }

    /// Attach range factors for `toa` to keyframe `kf_index`. Measurements
    /// of uninitialized stations are parked; parked stations are initialized
    /// as soon as enough observations with well-conditioned geometry exist.
    /// Returns the measurements attached to this keyframe right away.
    fn add_toa_factors(
        &mut self,
        kf_index: usize,
        toa: &[ToaMeasurement],
    ) -> Result<Vec<ToaMeasurement>, PipelineError> {
        let mut attached = Vec::new();
        for m in toa {
            let station = self
                .stations
                .get_mut(&m.station_id)
                .ok_or(PipelineError::UnknownStation(m.station_id))?;
            if station.position_key.is_none() {
                station.parked.push((kf_index, m.range_m));
            } else if self.calibration_frozen {
                self.pending_toa.push((kf_index, m.station_id, m.range_m));
            } else {
                attached.push(*m);
            }
        }
        for m in &attached {
            self.attach_toa_factor(kf_index, m.station_id, m.range_m);
        }
        if self.try_initialize_stations() {
            self.calibration_settle_pending = true;
        }
        Ok(attached)
    }

    fn attach_toa_factor(&mut self, kf_index: usize, station_id: u32, range_m: f64) {
        let station = &self.stations[&station_id];
        let factor = ToaFactor::new(
            self.keyframes[kf_index].key,
            self.t_go_key,
            station.bias_key.expect("initialized station has a bias"),
            station.position_key.expect("station position exists"),
            self.scale_key,
            range_m,
        );
        let edge = FactorEdge::new_scalar(
            Box::new(factor),
            station.spec.sigma_m,
            RobustKernel::Huber {
                delta: TOA_HUBER_DELTA,
            },
        );
        self.graph.add_factor(edge);
        self.stations.get_mut(&station_id).unwrap().factor_count += 1;
        self.toa_factor_count += 1;
    }

    /// Linear trilateration of parked stations from the current global-frame
    /// keyframe positions, ignoring the (small) bias. Stations stay parked
    /// until the geometry is well conditioned.
    fn try_initialize_stations(&mut self) -> bool {
        let pending: Vec<u32> = self
            .stations
            .iter()
            .filter(|(_, st)| {
                st.position_key.is_none()
                    && st.parked.len() >= self.config.min_station_observations
            })
            .map(|(id, _)| *id)
            .collect();
        let mut initialized = false;
        for id in pending {
            let t_go = self.t_go();
            let scale = self.map_scale();
            let points: Vec<(Vector3<f64>, f64)> = self.stations[&id]
                .parked
                .iter()
                .map(|&(kf, d)| {
                    let local = self.graph.value(self.keyframes[kf].key).as_pose();
                    (global_pose(&t_go, scale, local).translation(), d)
                })
                .collect();
            let Some(position) = trilaterate(&points) else {
                continue;
            };
            let pos_key = self
                .graph
                .add_variable(Value::StationPosition(position), false)
                .expect("station variable");
            let bias_key = add_bias_variable(&mut self.graph, self.config.bias_prior_sigma_m)
                .expect("bias variable");
            let station = self.stations.get_mut(&id).unwrap();
            station.position_key = Some(pos_key);
            station.bias_key = Some(bias_key);
            let parked = std::mem::take(&mut station.parked);
            for (kf, range) in parked {
                self.attach_toa_factor(kf, id, range);
            }
            initialized = true;
        }
        initialized
    }

    /// Simulated place recognition: when the ground truth says the new
    /// keyframe revisits an old one (beyond a minimum index gap), add a
    /// relative-pose edge with survey-grade noise.
    fn maybe_close_loop(&mut self, kf_index: usize) {
        let Some(truth) = &self.config.loop_closure_truth else {
            return;
        };
        let window = self.config.toa_association_window;
        let Some(current_gt) = lookup_pose(truth, self.keyframes[kf_index].time, window) else {
            return;
        };
        let min_gap = 3 * self.config.window_size;
        let mut best: Option<(usize, f64, RigidTransform)> = None;
        for (j, kf) in self.keyframes.iter().enumerate() {
            if kf_index - j <= min_gap {
                break;
            }
            let Some(gt_j) = lookup_pose(truth, kf.time, window) else {
                continue;
            };
            let distance = (current_gt.translation() - gt_j.translation()).norm();
            if distance < LOOP_CLOSURE_DISTANCE_M
                && best.as_ref().is_none_or(|(_, d, _)| distance < *d)
            {
                best = Some((j, distance, gt_j));
            }
        }
        let Some((j, _, gt_j)) = best else {
            return;
        };
        // Truth is metric; the edge lives between map-frame poses, so the
        // translation is re-expressed with the current scale estimate.
        let relative = gt_j.inverse().compose(&current_gt);
        let map_translation = relative.translation() / self.map_scale();
        let mut noise = nalgebra::Vector6::zeros();
        let rot = Normal::new(0.0, LOOP_CLOSURE_ROT_SIGMA).expect("positive sigma");
        let trans = Normal::new(0.0, LOOP_CLOSURE_TRANS_SIGMA).expect("positive sigma");
        for i in 0..3 {
            noise[i] = rot.sample(&mut self.lc_rng);
            noise[i + 3] = trans.sample(&mut self.lc_rng);
        }
        let measured = RigidTransform::new(relative.rotation(), map_translation)
            .compose(&RigidTransform::exp(&Twist::from_vector(&noise)));
        self.add_relative_factor(
            self.keyframes[j].key,
            self.keyframes[kf_index].key,
            measured,
            LOOP_CLOSURE_ROT_SIGMA,
            LOOP_CLOSURE_TRANS_SIGMA / self.map_scale(),
            RobustKernel::Huber {
                delta: TOA_HUBER_DELTA,
            },
        );
    }

    /// |residual| / sigma of one range measurement at the current estimate.
    fn normalized_toa_residual(&self, pose_key: VariableKey, station_id: u32, range_m: f64) -> f64 {
        let st = &self.stations[&station_id];
        let Some(pos_key) = st.position_key else {
            return 0.0;
        };
        let bias = st
            .bias_key
            .map_or(0.0, |k| self.graph.value(k).as_scalar());
        let r = toa_residual(
            self.graph.value(pose_key).as_pose(),
            &self.t_go(),
            self.map_scale(),
            bias,
            self.graph.value(pos_key).as_point(),
            range_m,
        );
        r.abs() / st.spec.sigma_m
    }

    /// Re-express the map in units where the scale variable is 1: keyframe
    /// and transform translations multiply by `s`, relative measurements and
    /// their translation sigmas rescale, and subsequent odometry input is
    /// corrected by the same factor. Global-frame quantities are unchanged.
    fn propagate_scale(&mut self) -> Result<(), PipelineError> {
        let scale_key = self.scale_key.ok_or(PipelineError::NotMonocular)?;
        let s = self.graph.value(scale_key).as_scalar();
        if (s - 1.0).abs() < 1e-12 {
            return Ok(());
        }
        for kf in &self.keyframes {
            let pose = self.graph.value(kf.key).as_pose();
            let rescaled = RigidTransform::new(pose.rotation(), s * pose.translation());
            self.graph.set_value(kf.key, Value::Pose(rescaled));
        }
        let t_go = self.t_go();
        self.graph.set_value(
            self.t_go_key,
            Value::Transform(RigidTransform::new(t_go.rotation(), s * t_go.translation())),
        );
        for record in &mut self.relative_factors {
            record.measured = RigidTransform::new(
                record.measured.rotation(),
                s * record.measured.translation(),
            );
            record.sigma_trans *= s;
            let edge = relative_edge(
                record.from,
                record.to,
                &record.measured,
                record.sigma_rot,
                record.sigma_trans,
                record.kernel,
            );
            self.graph.replace_factor(record.factor, edge);
        }
        if let Some(delta) = &mut self.last_delta {
            *delta = RigidTransform::new(delta.rotation(), s * delta.translation());
        }
        self.graph.set_value(scale_key, Value::Scale(1.0));
        self.incoming_scale *= s;
        self.trigger.accumulated_motion_m *= s;
        Ok(())
    }
}

/// Add a clock-bias variable at zero with its zero-mean prior attached.
fn add_bias_variable(graph: &mut Graph, prior_sigma: f64) -> Result<VariableKey, GraphError> {
    let key = graph.add_variable(Value::Bias(0.0), false)?;
    graph.set_prior_information(
        key,
        DMatrix::from_element(1, 1, 1.0 / (prior_sigma * prior_sigma)),
    );
    Ok(key)
}

/// Build the weighted edge for a relative-pose measurement. The tangent
/// layout is `[rotation; translation]`, so the first three information
/// entries weight rotation.
fn relative_edge(
    from: VariableKey,
    to: VariableKey,
    measured: &RigidTransform,
    sigma_rot: f64,
    sigma_trans: f64,
    kernel: RobustKernel,
) -> FactorEdge {
    let mut info = DMatrix::zeros(6, 6);
    for i in 0..3 {
        info[(i, i)] = 1.0 / (sigma_rot * sigma_rot);
        info[(i + 3, i + 3)] = 1.0 / (sigma_trans * sigma_trans);
    }
    FactorEdge::new(
        Box::new(RelativePoseFactor::new(from, to, measured.clone())),
        info,
        kernel,
    )
}

/// Nearest pose in a time-sorted trajectory within `window` seconds.
fn lookup_pose(truth: &[TimedPose], time: f64, window: f64) -> Option<RigidTransform> {
    let idx = truth.partition_point(|tp| tp.time < time);
    let mut best: Option<(f64, &TimedPose)> = None;
    for candidate in [idx.checked_sub(1), Some(idx)].into_iter().flatten() {
        if let Some(tp) = truth.get(candidate) {
            let dt = (tp.time - time).abs();
            if best.is_none_or(|(bd, _)| dt < bd) {
                best = Some((dt, tp));
            }
        }
    }
    best.filter(|(dt, _)| *dt <= window)
        .map(|(_, tp)| tp.pose.clone())
}

/// Least-squares intersection of range spheres: subtracting the first
/// equation from the rest linearizes the system. Returns `None` when the
/// observation geometry leaves a direction unconstrained.
fn trilaterate(points: &[(Vector3<f64>, f64)]) -> Option<Vector3<f64>> {
    if points.len() < 4 {
        return None;
    }
    let (p0, d0) = points[0];
    let mut normal = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = Vector3::zeros();
    for &(p, d) in &points[1..] {
        let a = 2.0 * (p0 - p);
        let b = d * d - d0 * d0 - p.norm_squared() + p0.norm_squared();
        normal += a * a.transpose();
        rhs += a * b;
    }
    let eigen = normal.symmetric_eigenvalues();
    let max_eig = eigen.max();
    if max_eig <= 0.0 || eigen.min() <= max_eig * TRILATERATION_CONDITION_RATIO {
        return None;
    }
    normal.try_inverse().map(|inv| inv * rhs)
}

/// Drive a [`Backend`] over complete odometry and range streams with the
/// standard schedule and return the final estimate.
///
/// Keyframes are taken every `keyframe_stride` steps (plus a final partial
/// keyframe). Every `window_size` keyframes a sliding-window refinement runs
/// (followed by a scale refinement in monocular mode). Whenever a trigger
/// condition fires, a global refinement runs, followed by a transform
/// refinement and — in monocular mode — a scale refinement. The same
/// sequence flushes once more at the end of the streams.
pub fn run_backend(
    odometry: &[OdometryStep],
    toa: &[ToaMeasurement],
    mode: PipelineMode,
    config: &BackendConfig,
) -> Result<BackendEstimate, PipelineError> {
    if odometry.is_empty() {
        return Err(PipelineError::EmptyStream);
    }
    for step in odometry {
        if step.to_time <= step.from_time {
            return Err(PipelineError::NonMonotonicTimestamps(format!(
                "odometry step from t={} to t={}",
                step.from_time, step.to_time
            )));
        }
    }
    for pair in odometry.windows(2) {
        if pair[1].from_time < pair[0].to_time - 1e-9 {
            return Err(PipelineError::NonMonotonicTimestamps(format!(
                "odometry step at t={} overlaps the previous step ending at t={}",
                pair[1].from_time, pair[0].to_time
            )));
        }
    }
    for pair in toa.windows(2) {
        if pair[1].time < pair[0].time {
            return Err(PipelineError::NonMonotonicTimestamps(format!(
                "range measurement at t={} follows t={}",
                pair[1].time, pair[0].time
            )));
        }
    }

    let window = config.toa_association_window;
    let mut cursor = 0usize;
    // Consume measurements in stream order so each one is attached to at
    // most one keyframe.
    let mut take = |t: f64| -> Vec<ToaMeasurement> {
        while cursor < toa.len() && toa[cursor].time < t - window {
            cursor += 1;
        }
        let start = cursor;
        while cursor < toa.len() && toa[cursor].time <= t + window {
            cursor += 1;
        }
        toa[start..cursor].to_vec()
    };

    let start_time = odometry[0].from_time;
    let mut backend = Backend::new(mode, config.clone(), start_time, &take(start_time))?;
    let monocular = mode.sensor == SensorMode::Monocular;

    // With surveyed stations the transform is estimated, and refitting it
    // against the first few ranges overfits badly. Park ranges until the
    // data identifies calibration, then fit the transform on the clean
    // odometry map before anything else moves.
    if mode.stations == StationMode::Known {
        backend.set_calibration_frozen(true);
    }

    let mut accumulated: Option<RigidTransform> = None;
    let mut steps_in_keyframe = 0usize;
    let mut keyframes_added = 0usize;
    for (i, step) in odometry.iter().enumerate() {
        accumulated = Some(match accumulated {
            Some(acc) => acc.compose(&step.delta),
            None => step.delta.clone(),
        });
        steps_in_keyframe += 1;
        let is_last = i + 1 == odometry.len();
        if steps_in_keyframe < config.keyframe_stride && !is_last {
            continue;
        }

        let time = step.to_time;
        let delta = accumulated.take().expect("at least one step accumulated");
        steps_in_keyframe = 0;
        backend.tracking_pose_step(time, &delta, &take(time))?;
        keyframes_added += 1;

        if backend.calibration_frozen() && backend.calibration_ready() {
            backend.set_calibration_frozen(false);
            backend.transformation_refinement()?;
            backend.global_map_refinement()?;
            if monocular {
                backend.scale_refinement()?;
            }
            backend.reset_triggers(time);
        }

        if keyframes_added % config.window_size == 0 {
            backend.local_window_refinement()?;
            if monocular && !backend.calibration_frozen() && backend.toa_factor_count() > 0 {
                backend.scale_refinement()?;
            }
        }

        if should_trigger_global_refinement(backend.trigger_state(), &config.thresholds) {
            backend.global_map_refinement()?;
            if !backend.calibration_frozen() && backend.toa_factor_count() > 0 {
                backend.transformation_refinement()?;
                if monocular {
                    backend.scale_refinement()?;
                }
            }
            backend.reset_triggers(time);
        }
    }

    if backend.keyframe_count() >= 2 {
        // A short stream may end before calibration was released; use
        // whatever ranges were parked, transform first.
        if backend.calibration_frozen() {
            backend.set_calibration_frozen(false);
            if backend.toa_factor_count() > 0 {
                backend.transformation_refinement()?;
            }
        }
        backend.global_map_refinement()?;
        if backend.toa_factor_count() > 0 {
            backend.transformation_refinement()?;
            if monocular {
                backend.scale_refinement()?;
                backend.global_map_refinement()?;
                backend.transformation_refinement()?;
            }
        }
    }

    Ok(backend.estimate())
}

#[cfg(test)]
mod tests;
