use approx::assert_relative_eq;
use nalgebra::{UnitQuaternion, Vector3};

use super::*;
use crate::eval::{ate_rmse, Alignment};
use crate::simulate::presets::{box_waypoints, StationLayout};
use crate::simulate::{
    corrupt_odometry, generate_trajectory, simulate_toa, BaseStation, OdometryNoiseModel,
    SyntheticTrajectory,
};

/// Per-draw range noise far below every tolerance in this module, so the
/// measurements are effectively exact while still flowing through the
/// regular simulation path.
const EXACT_SIGMA: f64 = 1e-13;
/// Weighting sigma paired with near-exact measurements: keeps range
/// information finite and comparable to the odometry weights.
const EXACT_WEIGHT: f64 = 1e-3;

fn box_truth(duration: f64) -> Vec<TimedPose> {
    let wps: Vec<_> = box_waypoints()
        .iter()
        .map(|w| Vector3::from_column_slice(w))
        .collect();
    generate_trajectory(&SyntheticTrajectory::new(wps, duration, 20.0)).unwrap()
}

/// The trajectory as the odometry frame sees it: first pose at the identity.
fn local_truth(truth: &[TimedPose]) -> Vec<TimedPose> {
    let anchor = truth[0].pose.inverse();
    truth
        .iter()
        .map(|tp| TimedPose::new(tp.time, anchor.compose(&tp.pose)))
        .collect()
}

fn exact_stations() -> Vec<BaseStation> {
    StationLayout::Tetrahedral.stations(EXACT_SIGMA, 0.0)
}

fn station_specs(stations: &[BaseStation], known: bool, weight: Option<f64>) -> Vec<StationSpec> {
    stations
        .iter()
        .map(|s| StationSpec {
            id: s.id,
            sigma_m: weight.unwrap_or(s.sigma_m),
            position: known.then_some(s.position),
        })
        .collect()
}

fn noiseless_odometry(truth: &[TimedPose]) -> Vec<OdometryStep> {
    corrupt_odometry(truth, &OdometryNoiseModel::default(), 0)
}

fn scaled_odometry(truth: &[TimedPose], scale: f64) -> Vec<OdometryStep> {
    let model = OdometryNoiseModel {
        scale_drift: scale,
        ..OdometryNoiseModel::default()
    };
    corrupt_odometry(truth, &model, 0)
}

fn toa_near(toa: &[ToaMeasurement], t: f64, window: f64) -> Vec<ToaMeasurement> {
    toa.iter()
        .filter(|m| (m.time - t).abs() <= window)
        .copied()
        .collect()
}

/// Feed keyframes through tracking only (no refinements), mirroring the
/// stride logic of [`run_backend`].
fn drive_tracking(backend: &mut Backend, odometry: &[OdometryStep], toa: &[ToaMeasurement]) {
    let stride = backend.config.keyframe_stride;
    let window = backend.config.toa_association_window;
    let mut acc: Option<RigidTransform> = None;
    let mut steps = 0usize;
    for (i, step) in odometry.iter().enumerate() {
        acc = Some(match acc.take() {
            Some(a) => a.compose(&step.delta),
            None => step.delta.clone(),
        });
        steps += 1;
        if steps < stride && i + 1 != odometry.len() {
            continue;
        }
        let delta = acc.take().unwrap();
        steps = 0;
        backend
            .tracking_pose_step(step.to_time, &delta, &toa_near(toa, step.to_time, window))
            .unwrap();
    }
}

/// Attach exact range measurements to every existing keyframe after the
/// fact, so refinement tests see undistorted tracking output.
fn attach_exact_toa(backend: &mut Backend, toa: &[ToaMeasurement]) {
    let window = backend.config.toa_association_window;
    for index in 0..backend.keyframe_count() {
        let time = backend.keyframes[index].time;
        let slice = toa_near(toa, time, window);
        backend.add_toa_factors(index, &slice).unwrap();
    }
}

fn snapshot_values(backend: &Backend) -> Vec<Value> {
    (0..backend.graph.variable_count())
        .map(|i| backend.graph.value(VariableKey(i)).clone())
        .collect()
}

// ---------------------------------------------------------------------------
// full runs

#[test]
fn noiseless_run_recovers_the_transform_and_map() {
    let truth = box_truth(40.0);
    let odometry = noiseless_odometry(&truth);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 7);

    let t_go_true = truth[0].pose.clone();
    let perturb = RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.2),
        Vector3::new(0.5, -0.3, 0.2),
    );
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, Some(EXACT_WEIGHT));
    config.t_go_init = t_go_true.compose(&perturb);
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;

    let estimate = run_backend(&odometry, &toa, PipelineMode::range_scaled_known(), &config)
        .unwrap();

    assert!(estimate.t_go.rotation_angle_to(&t_go_true) < 1e-4);
    assert!((estimate.t_go.translation() - t_go_true.translation()).norm() < 1e-4);
    assert_eq!(estimate.scale, 1.0);
    for bias in estimate.biases.values() {
        assert!(bias.abs() < 1e-4);
    }
    let ate = ate_rmse(&estimate.global_trajectory, &truth, Alignment::None).unwrap();
    assert!(ate.rmse_m < 1e-3, "global ATE {} too large", ate.rmse_m);
}

#[test]
fn run_without_ranges_is_pure_odometry_integration() {
    let truth = box_truth(20.0);
    let odometry = noiseless_odometry(&truth);
    let stations = exact_stations();
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, Some(EXACT_WEIGHT));
    config.t_go_init = truth[0].pose.clone();

    let estimate =
        run_backend(&odometry, &[], PipelineMode::range_scaled_known(), &config).unwrap();

    // The transform had nothing to correct it and must sit exactly at its
    // initial value.
    assert!(estimate.t_go.rotation_angle_to(&truth[0].pose) < 1e-15);
    assert!((estimate.t_go.translation() - truth[0].pose.translation()).norm() < 1e-15);

    // Keyframes are the exact composition of the deltas between them.
    let local = local_truth(&truth);
    let ate = ate_rmse(&estimate.keyframes, &local, Alignment::None).unwrap();
    assert!(ate.rmse_m < 1e-9, "integration drift {}", ate.rmse_m);
    for bias in estimate.biases.values() {
        assert_eq!(*bias, 0.0);
    }
}

#[test]
fn monocular_run_recovers_doubled_scale() {
    let truth = box_truth(60.0);
    let odometry = scaled_odometry(&truth, 0.5);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 3);

    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, Some(0.05));
    config.t_go_init = truth[0].pose.clone();
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;

    let estimate =
        run_backend(&odometry, &toa, PipelineMode::monocular_known(), &config).unwrap();

    assert!(
        (estimate.scale - 2.0).abs() / 2.0 < 0.02,
        "recovered scale {} not within 2% of 2.0",
        estimate.scale
    );
    let ate = ate_rmse(&estimate.global_trajectory, &truth, Alignment::None).unwrap();
    assert!(ate.rmse_m < 0.02, "global ATE {} too large", ate.rmse_m);
    assert!(estimate.t_go.rotation_angle_to(&truth[0].pose) < 1e-3);
}

#[test]
fn scale_gauge_sweep_recovers_the_inverse_factor() {
    let truth = box_truth(40.0);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 11);
    for k in [0.5, 1.0, 2.0, 4.0] {
        let odometry = scaled_odometry(&truth, k);
        let mut config = BackendConfig::default();
        config.stations = station_specs(&stations, true, Some(0.05));
        config.t_go_init = truth[0].pose.clone();
        config.odometry_translation_sigma = 1e-4;
        config.odometry_rotation_sigma = 1e-4;
        let estimate =
            run_backend(&odometry, &toa, PipelineMode::monocular_known(), &config).unwrap();
        let expected = 1.0 / k;
        assert!(
            (estimate.scale - expected).abs() / expected < 0.02,
            "k={k}: recovered {} expected {expected}",
            estimate.scale
        );
        let ate = ate_rmse(&estimate.global_trajectory, &truth, Alignment::None).unwrap();
        assert!(ate.rmse_m < 0.05, "k={k}: global ATE {}", ate.rmse_m);
    }
}

#[test]
fn backend_runs_are_deterministic() {
    let truth = box_truth(30.0);
    let model = OdometryNoiseModel {
        translation_sigma: 0.004,
        rotation_sigma: 0.001,
        ..OdometryNoiseModel::default()
    };
    let odometry = corrupt_odometry(&truth, &model, 5);
    let stations = StationLayout::Tetrahedral.stations(0.19, 0.02);
    let toa = simulate_toa(&truth, &stations, 10.0, 5);
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, None);
    config.t_go_init = truth[0].pose.clone();

    let mode = PipelineMode::range_scaled_known();
    let a = run_backend(&odometry, &toa, mode, &config).unwrap();
    let b = run_backend(&odometry, &toa, mode, &config).unwrap();
    assert_eq!(a.keyframes.len(), b.keyframes.len());
    for (x, y) in a.keyframes.iter().zip(&b.keyframes) {
        assert_eq!(x.pose.translation(), y.pose.translation());
        assert_eq!(x.pose.rotation(), y.pose.rotation());
    }
    assert_eq!(a.scale, b.scale);
    assert_eq!(a.biases, b.biases);
    assert_eq!(a.t_go.translation(), b.t_go.translation());
}

#[test]
fn ranges_help_on_every_seed() {
    // Ranging must shrink the aligned local drift. (An unaligned global
    // comparison would hand the range-free baseline the true transform for
    // free, so both candidates are aligned the way odometry-only systems are
    // evaluated.)
    let truth = box_truth(90.0);
    let local = local_truth(&truth);
    let stations = StationLayout::Tetrahedral.stations(0.19, 0.0);
    let model = OdometryNoiseModel {
        translation_sigma: 0.004,
        rotation_sigma: 0.001,
        ..OdometryNoiseModel::default()
    };
    let mut improvements = Vec::new();
    for seed in 1..=5u64 {
        let odometry = corrupt_odometry(&truth, &model, seed);
        let toa = simulate_toa(&truth, &stations, 10.0, seed);
        let mut config = BackendConfig::default();
        config.stations = station_specs(&stations, true, None);
        config.t_go_init = truth[0].pose.clone();
        config.odometry_translation_sigma = BackendConfig::keyframe_sigma(0.004, 10);
        config.odometry_rotation_sigma = BackendConfig::keyframe_sigma(0.001, 10);

        let mode = PipelineMode::range_scaled_known();
        let with = run_backend(&odometry, &toa, mode, &config).unwrap();
        let without = run_backend(&odometry, &[], mode, &config).unwrap();

        let ate_with = ate_rmse(&with.keyframes, &local, Alignment::Se3)
            .unwrap()
            .rmse_m;
        let ate_without = ate_rmse(&without.keyframes, &local, Alignment::Se3)
            .unwrap()
            .rmse_m;
        assert!(
            ate_with < ate_without,
            "seed {seed}: with ranges {ate_with} >= without {ate_without}"
        );
        improvements.push(100.0 * (ate_without - ate_with) / ate_without);
    }
    let mean = improvements.iter().sum::<f64>() / improvements.len() as f64;
    assert!(mean > 0.0, "mean improvement {mean}% not positive");
}

#[test]
fn monocular_accuracy_stays_near_metric_accuracy() {
    let truth = box_truth(60.0);
    let stations = StationLayout::Tetrahedral.stations(0.19, 0.0);
    let toa = simulate_toa(&truth, &stations, 10.0, 9);
    let base = OdometryNoiseModel {
        translation_sigma: 0.004,
        rotation_sigma: 0.001,
        ..OdometryNoiseModel::default()
    };
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, None);
    config.t_go_init = truth[0].pose.clone();
    config.odometry_translation_sigma = BackendConfig::keyframe_sigma(0.004, 10);
    config.odometry_rotation_sigma = BackendConfig::keyframe_sigma(0.001, 10);

    let odo_metric = corrupt_odometry(&truth, &base, 9);
    let metric = run_backend(&odo_metric, &toa, PipelineMode::range_scaled_known(), &config)
        .unwrap();
    let ate_metric = ate_rmse(&metric.global_trajectory, &truth, Alignment::None)
        .unwrap()
        .rmse_m;

    let shrunk = OdometryNoiseModel {
        scale_drift: 0.5,
        ..base
    };
    let odo_mono = corrupt_odometry(&truth, &shrunk, 9);
    let mono = run_backend(&odo_mono, &toa, PipelineMode::monocular_known(), &config).unwrap();
    let ate_mono = ate_rmse(&mono.global_trajectory, &truth, Alignment::None)
        .unwrap()
        .rmse_m;

    assert!(
        (ate_mono - ate_metric).abs() <= 0.10 * ate_metric + 0.01,
        "monocular ATE {ate_mono} strays from metric ATE {ate_metric}"
    );
    assert!((mono.scale - 2.0).abs() / 2.0 < 0.05, "scale {}", mono.scale);
}

// ---------------------------------------------------------------------------
// tracking step

#[test]
fn tracking_without_ranges_composes_exactly() {
    let mut config = BackendConfig::default();
    config.stations = station_specs(&exact_stations(), true, Some(EXACT_WEIGHT));
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();

    let d1 = RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.1),
        Vector3::new(0.3, 0.1, -0.05),
    );
    let d2 = RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -0.07),
        Vector3::new(0.2, -0.2, 0.1),
    );
    backend.tracking_pose_step(0.5, &d1, &[]).unwrap();
    backend.tracking_pose_step(1.0, &d2, &[]).unwrap();

    let expected1 = d1.clone();
    let expected2 = d1.compose(&d2);
    assert!(backend.keyframe(1).pose.rotation_angle_to(&expected1) < 1e-12);
    assert!((backend.keyframe(1).pose.translation() - expected1.translation()).norm() < 1e-12);
    assert!(backend.keyframe(2).pose.rotation_angle_to(&expected2) < 1e-12);
    assert!((backend.keyframe(2).pose.translation() - expected2.translation()).norm() < 1e-12);
}

#[test]
fn tracking_balances_odometry_against_a_conflicting_range() {
    // Station dead ahead on the x axis; odometry says we advanced to x = 1,
    // the range says x = 1.5. Equal weights put the optimum halfway.
    let mut config = BackendConfig::default();
    config.stations = vec![StationSpec {
        id: 1,
        sigma_m: 0.1,
        position: Some(Vector3::new(10.0, 0.0, 0.0)),
    }];
    config.odometry_translation_sigma = 0.1;
    config.odometry_rotation_sigma = 0.05;
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();

    let delta = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
    let toa = [ToaMeasurement {
        time: 0.5,
        station_id: 1,
        range_m: 8.5,
    }];
    let report = backend.tracking_pose_step(0.5, &delta, &toa).unwrap();

    assert!(report.final_cost < report.initial_cost);
    let p = backend.keyframe(1).pose.translation();
    assert_relative_eq!(p.x, 1.25, epsilon = 1e-6);
    assert!(p.y.abs() < 1e-9 && p.z.abs() < 1e-9);
}

#[test]
fn tracking_touches_only_the_new_pose() {
    let mut config = BackendConfig::default();
    config.stations = vec![StationSpec {
        id: 1,
        sigma_m: 0.1,
        position: Some(Vector3::new(10.0, 0.0, 0.0)),
    }];
    // A deliberately wrong transform: plenty of incentive to move anything
    // that is not clamped.
    config.t_go_init = RigidTransform::from_translation(Vector3::new(0.4, -0.2, 0.1));
    let initial_toa = [ToaMeasurement {
        time: 0.0,
        station_id: 1,
        range_m: 9.0,
    }];
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &initial_toa).unwrap();

    let before = snapshot_values(&backend);
    let delta = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
    let toa = [ToaMeasurement {
        time: 0.5,
        station_id: 1,
        range_m: 8.2,
    }];
    backend.tracking_pose_step(0.5, &delta, &toa).unwrap();
    let after = snapshot_values(&backend);

    // Every variable that existed before the step is bit-for-bit unchanged;
    // exactly one new pose variable appeared.
    assert_eq!(after.len(), before.len() + 1);
    for (b, a) in before.iter().zip(&after) {
        assert_eq!(b, a);
    }
    // And the new pose did move off the pure composition to meet the range.
    let p = backend.keyframe(1).pose.translation();
    assert!((p - delta.translation()).norm() > 1e-6);
}

// ---------------------------------------------------------------------------
// window refinement

#[test]
fn window_refinement_is_a_noop_on_consistent_input() {
    let truth = box_truth(8.0);
    let odometry = noiseless_odometry(&truth);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 1);

    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, Some(EXACT_WEIGHT));
    config.t_go_init = truth[0].pose.clone();
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;
    let start = odometry[0].from_time;
    let window = config.toa_association_window;
    let mut backend = Backend::new(
        PipelineMode::range_scaled_known(),
        config,
        start,
        &toa_near(&toa, start, window),
    )
    .unwrap();
    drive_tracking(&mut backend, &odometry, &toa);

    let before = snapshot_values(&backend);
    backend.local_window_refinement().unwrap();
    let after = snapshot_values(&backend);
    for (b, a) in before.iter().zip(&after) {
        let d = a.local_difference(b);
        assert!(d.norm() < 1e-8, "consistent state moved by {}", d.norm());
    }
}

#[test]
fn window_refinement_improves_recent_poses() {
    let truth = box_truth(8.0);
    let model = OdometryNoiseModel {
        translation_sigma: 0.01,
        rotation_sigma: 0.002,
        ..OdometryNoiseModel::default()
    };
    let odometry = corrupt_odometry(&truth, &model, 4);
    let stations = StationLayout::Tetrahedral.stations(0.05, 0.0);
    let toa = simulate_toa(&truth, &stations, 10.0, 4);

    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, None);
    config.t_go_init = truth[0].pose.clone();
    config.odometry_translation_sigma = BackendConfig::keyframe_sigma(0.01, 10);
    config.odometry_rotation_sigma = BackendConfig::keyframe_sigma(0.002, 10);
    let start = odometry[0].from_time;
    let window = config.toa_association_window;
    let mut backend = Backend::new(
        PipelineMode::range_scaled_known(),
        config,
        start,
        &toa_near(&toa, start, window),
    )
    .unwrap();
    drive_tracking(&mut backend, &odometry, &toa);

    let local = local_truth(&truth);
    let windowed = |backend: &Backend| -> f64 {
        let n = backend.keyframe_count();
        let poses: Vec<TimedPose> = (n.saturating_sub(10)..n)
            .map(|i| backend.keyframe(i))
            .collect();
        ate_rmse(&poses, &local, Alignment::None).unwrap().rmse_m
    };
    let before = windowed(&backend);
    backend.local_window_refinement().unwrap();
    let after = windowed(&backend);
    assert!(
        after < before,
        "window refinement did not improve: {before} -> {after}"
    );
}

#[test]
fn window_refinement_never_moves_the_transform_in_unknown_mode() {
    let truth = box_truth(8.0);
    let model = OdometryNoiseModel {
        translation_sigma: 0.01,
        rotation_sigma: 0.002,
        ..OdometryNoiseModel::default()
    };
    let odometry = corrupt_odometry(&truth, &model, 4);
    let stations = StationLayout::Tetrahedral.stations(0.05, 0.0);
    let toa = simulate_toa(&truth, &stations, 10.0, 4);

    // Station positions expressed in the odometry frame, because the fixed
    // identity transform makes that the global frame.
    let anchor = truth[0].pose.inverse();
    let local_specs: Vec<StationSpec> = stations
        .iter()
        .map(|s| StationSpec {
            id: s.id,
            sigma_m: s.sigma_m,
            position: Some(anchor.transform_point(&s.position)),
        })
        .collect();
    let mut config = BackendConfig::default();
    config.stations = local_specs;
    config.odometry_translation_sigma = BackendConfig::keyframe_sigma(0.01, 10);
    config.odometry_rotation_sigma = BackendConfig::keyframe_sigma(0.002, 10);
    let mode = PipelineMode {
        sensor: SensorMode::RangeScaled,
        stations: StationMode::Unknown,
        loop_closure: false,
    };
    let start = odometry[0].from_time;
    let window = config.toa_association_window;
    let mut backend =
        Backend::new(mode, config, start, &toa_near(&toa, start, window)).unwrap();
    drive_tracking(&mut backend, &odometry, &toa);

    let t_go_before = backend.t_go();
    let station_before = backend.station_position(1).unwrap();
    backend.local_window_refinement().unwrap();
    backend.global_map_refinement().unwrap();
    let t_go_after = backend.t_go();

    assert_eq!(t_go_before.translation(), t_go_after.translation());
    assert_eq!(t_go_before.rotation(), t_go_after.rotation());
    // Stations, by contrast, are free in unknown mode.
    assert!(backend.graph.is_fixed(backend.t_go_key));
    let station_after = backend.station_position(1).unwrap();
    assert!(
        (station_before - station_after).norm() > 0.0
            || backend.stations[&1].factor_count > 0
    );
}

// ---------------------------------------------------------------------------
// trigger logic

#[test]
fn trigger_fires_on_any_single_condition() {
    let thresholds = TriggerThresholds::default();
    let zero = RefinementTriggerState::default();
    assert!(!should_trigger_global_refinement(&zero, &thresholds));

    // Exactly at a threshold: strict comparison, no trigger.
    let at = RefinementTriggerState {
        max_normalized_residual: thresholds.max_normalized_residual,
        accumulated_motion_m: thresholds.accumulated_motion_m,
        elapsed_s: thresholds.elapsed_s,
        keyframes_added: thresholds.keyframes,
    };
    assert!(!should_trigger_global_refinement(&at, &thresholds));

    // All sixteen on/off combinations behave as an OR.
    for bits in 0..16u32 {
        let state = RefinementTriggerState {
            max_normalized_residual: if bits & 1 != 0 {
                thresholds.max_normalized_residual + 0.001
            } else {
                0.0
            },
            accumulated_motion_m: if bits & 2 != 0 {
                thresholds.accumulated_motion_m + 0.001
            } else {
                0.0
            },
            elapsed_s: if bits & 4 != 0 {
                thresholds.elapsed_s + 0.001
            } else {
                0.0
            },
            keyframes_added: if bits & 8 != 0 {
                thresholds.keyframes + 1
            } else {
                0
            },
        };
        assert_eq!(
            should_trigger_global_refinement(&state, &thresholds),
            bits != 0,
            "combination {bits:04b}"
        );
    }
}

#[test]
fn tracking_accumulates_trigger_statistics() {
    let mut config = BackendConfig::default();
    config.stations = vec![StationSpec {
        id: 1,
        sigma_m: 0.1,
        position: Some(Vector3::new(10.0, 0.0, 0.0)),
    }];
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();
    let delta = RigidTransform::from_translation(Vector3::new(1.0, 0.0, 0.0));
    backend.tracking_pose_step(0.5, &delta, &[]).unwrap();
    backend.tracking_pose_step(1.0, &delta, &[]).unwrap();

    let state = backend.trigger_state();
    assert_eq!(state.keyframes_added, 2);
    assert_relative_eq!(state.accumulated_motion_m, 2.0, epsilon = 1e-12);
    assert_relative_eq!(state.elapsed_s, 1.0, epsilon = 1e-12);
    assert_eq!(state.max_normalized_residual, 0.0);

    // A conflicting range leaves a residual even after the pose step.
    let toa = [ToaMeasurement {
        time: 1.5,
        station_id: 1,
        range_m: 6.0,
    }];
    backend.tracking_pose_step(1.5, &delta, &toa).unwrap();
    assert!(backend.trigger_state().max_normalized_residual > 1.0);

    backend.reset_triggers(1.5);
    let state = backend.trigger_state();
    assert_eq!(state.keyframes_added, 0);
    assert_eq!(state.accumulated_motion_m, 0.0);
    assert_eq!(state.max_normalized_residual, 0.0);
}

// ---------------------------------------------------------------------------
// global refinement

#[test]
fn global_refinement_heals_accumulated_drift() {
    let truth = box_truth(30.0);
    let model = OdometryNoiseModel {
        translation_sigma: 0.008,
        rotation_sigma: 0.002,
        ..OdometryNoiseModel::default()
    };
    let odometry = corrupt_odometry(&truth, &model, 2);
    let stations = StationLayout::Tetrahedral.stations(0.05, 0.0);
    let toa = simulate_toa(&truth, &stations, 10.0, 2);

    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, None);
    config.t_go_init = truth[0].pose.clone();
    config.odometry_translation_sigma = BackendConfig::keyframe_sigma(0.008, 10);
    config.odometry_rotation_sigma = BackendConfig::keyframe_sigma(0.002, 10);
    let start = odometry[0].from_time;
    let window = config.toa_association_window;
    let mut backend = Backend::new(
        PipelineMode::range_scaled_known(),
        config,
        start,
        &toa_near(&toa, start, window),
    )
    .unwrap();
    drive_tracking(&mut backend, &odometry, &toa);

    let global_ate = |backend: &Backend| -> f64 {
        let est = backend.estimate();
        ate_rmse(&est.global_trajectory, &truth, Alignment::None)
            .unwrap()
            .rmse_m
    };
    let before = global_ate(&backend);
    backend.global_map_refinement().unwrap();
    let mid = global_ate(&backend);
    assert!(mid < before, "global refinement did not help: {before} -> {mid}");

    // Running it again from the optimum must change nothing measurable.
    let snapshot = snapshot_values(&backend);
    backend.global_map_refinement().unwrap();
    let after = snapshot_values(&backend);
    for (b, a) in snapshot.iter().zip(&after) {
        assert!(a.local_difference(b).norm() < 1e-9);
    }
}

#[test]
fn global_refinement_leaves_a_consistent_chain_alone() {
    let truth = box_truth(10.0);
    let odometry = noiseless_odometry(&truth);
    let mut config = BackendConfig::default();
    config.stations = station_specs(&exact_stations(), true, Some(EXACT_WEIGHT));
    config.t_go_init = truth[0].pose.clone();
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();
    drive_tracking(&mut backend, &odometry, &[]);

    let before = snapshot_values(&backend);
    backend.global_map_refinement().unwrap();
    let after = snapshot_values(&backend);
    for (b, a) in before.iter().zip(&after) {
        assert!(a.local_difference(b).norm() < 1e-10);
    }
}

// ---------------------------------------------------------------------------
// transformation refinement

#[test]
fn transformation_refinement_recovers_a_perturbed_transform() {
    let truth = box_truth(12.0);
    let odometry = noiseless_odometry(&truth);
    let stations = StationLayout::Tetrahedral.stations(EXACT_SIGMA, 0.1);
    let toa = simulate_toa(&truth, &stations, 10.0, 6);

    let t_go_true = truth[0].pose.clone();
    let perturb = RigidTransform::new(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 30f64.to_radians()),
        Vector3::new(1.0, 0.0, 0.0),
    );
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, Some(EXACT_WEIGHT));
    config.t_go_init = t_go_true.compose(&perturb);
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();
    // Build the chain undisturbed, then hand it the (exact) ranges.
    drive_tracking(&mut backend, &odometry, &[]);
    attach_exact_toa(&mut backend, &toa);

    let poses_before = snapshot_values(&backend);
    backend.transformation_refinement().unwrap();

    let t_go = backend.t_go();
    assert!(
        t_go.rotation_angle_to(&t_go_true) < 1e-4,
        "rotation error {}",
        t_go.rotation_angle_to(&t_go_true)
    );
    assert!(
        (t_go.translation() - t_go_true.translation()).norm() < 1e-4,
        "translation error {}",
        (t_go.translation() - t_go_true.translation()).norm()
    );
    // The measured ranges carried a 0.1 m bias, co-estimated per station.
    for id in 1..=4u32 {
        assert_relative_eq!(backend.bias(id).unwrap(), 0.1, epsilon = 1e-3);
    }
    // Poses are clamped during this refinement.
    let poses_after = snapshot_values(&backend);
    for (index, (b, a)) in poses_before.iter().zip(&poses_after).enumerate() {
        if matches!(b, Value::Pose(_)) {
            assert_eq!(b, a, "pose variable {index} moved");
        }
    }
}

#[test]
fn transformation_refinement_requires_range_factors() {
    let mut config = BackendConfig::default();
    config.stations = station_specs(&exact_stations(), true, Some(EXACT_WEIGHT));
    let mut backend =
        Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();
    backend
        .tracking_pose_step(
            0.5,
            &RigidTransform::from_translation(Vector3::new(0.5, 0.0, 0.0)),
            &[],
        )
        .unwrap();
    assert!(matches!(
        backend.transformation_refinement(),
        Err(PipelineError::NoToaFactors)
    ));
}

#[test]
fn single_station_on_a_straight_line_leaves_weak_directions() {
    // Trajectory along the x axis, station on the same axis: ranges only pin
    // the transform's x translation.
    let wps = vec![
        Vector3::new(0.0, 0.0, 1.2),
        Vector3::new(4.0, 0.0, 1.2),
        Vector3::new(8.0, 0.0, 1.2),
    ];
    let truth =
        generate_trajectory(&SyntheticTrajectory::new(wps, 12.0, 20.0)).unwrap();
    let odometry = noiseless_odometry(&truth);
    let line_station = vec![BaseStation::new(
        1,
        Vector3::new(20.0, 0.0, 1.2),
        EXACT_SIGMA,
        0.0,
    )];
    let toa = simulate_toa(&truth, &line_station, 10.0, 8);

    let build = |truth: &[TimedPose],
                 odometry: &[OdometryStep],
                 stations: &[BaseStation],
                 toa: &[ToaMeasurement]|
     -> Backend {
        let mut config = BackendConfig::default();
        config.stations = station_specs(stations, true, Some(EXACT_WEIGHT));
        config.t_go_init = truth[0].pose.clone();
        config.odometry_translation_sigma = 1e-4;
        config.odometry_rotation_sigma = 1e-4;
        let mut backend =
            Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]).unwrap();
        drive_tracking(&mut backend, odometry, &[]);
        attach_exact_toa(&mut backend, toa);
        backend
    };

    let weak = build(&truth, &odometry, &line_station, &toa);
    let weak_info = weak.transform_information().unwrap();
    let weak_diag: Vec<f64> = (0..6).map(|i| weak_info[(i, i)]).collect();
    let weak_max = weak_diag.iter().cloned().fold(0.0, f64::max);
    let weak_min = weak_diag.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(weak_max > 0.0);
    assert!(
        weak_min < weak_max * 1e-9,
        "expected near-singular directions, diag {weak_diag:?}"
    );

    // A curved trajectory ranged by a full constellation pins every
    // direction of the transform. (A straight line would leave the roll
    // about its own axis unobservable no matter how many stations range it:
    // collinear points sit on the rotation axis.)
    let curved_truth = box_truth(12.0);
    let curved_odometry = noiseless_odometry(&curved_truth);
    let full_stations = exact_stations();
    let full_toa = simulate_toa(&curved_truth, &full_stations, 10.0, 8);
    let strong = build(&curved_truth, &curved_odometry, &full_stations, &full_toa);
    let strong_info = strong.transform_information().unwrap();
    let strong_diag: Vec<f64> = (0..6).map(|i| strong_info[(i, i)]).collect();
    let strong_max = strong_diag.iter().cloned().fold(0.0, f64::max);
    let strong_min = strong_diag.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        strong_min > strong_max * 1e-6,
        "full constellation should observe the transform, diag {strong_diag:?}"
    );
}

// ---------------------------------------------------------------------------
// scale refinement

#[test]
fn scale_refinement_recovers_halved_odometry() {
    let truth = box_truth(12.0);
    let odometry = scaled_odometry(&truth, 0.5);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 12);

    let t0 = truth[0].pose.clone();
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, true, Some(EXACT_WEIGHT));
    // In the monocular gauge a half-scale map pairs with a half-scale
    // transform translation.
    config.t_go_init = RigidTransform::new(t0.rotation(), 0.5 * t0.translation());
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;
    let mut backend =
        Backend::new(PipelineMode::monocular_known(), config, 0.0, &[]).unwrap();
    drive_tracking(&mut backend, &odometry, &[]);
    attach_exact_toa(&mut backend, &toa);

    let kf5_before = backend.keyframe(5).pose.translation();
    backend.scale_refinement().unwrap();

    // Scale recovered and immediately propagated into the map.
    assert_relative_eq!(backend.recovered_scale(), 2.0, epsilon = 1e-6);
    assert_eq!(backend.map_scale(), 1.0);
    let kf5_after = backend.keyframe(5).pose.translation();
    assert_relative_eq!(kf5_after, 2.0 * kf5_before, epsilon = 1e-6);
    // The transform translation doubled with the map, restoring the metric
    // gauge.
    assert_relative_eq!(
        backend.t_go().translation(),
        t0.translation(),
        epsilon = 1e-6
    );

    // A second refinement finds nothing left to correct.
    let est1 = backend.estimate();
    backend.scale_refinement().unwrap();
    let est2 = backend.estimate();
    assert_relative_eq!(est1.scale, est2.scale, epsilon = 1e-9);
    for (a, b) in est1.global_trajectory.iter().zip(&est2.global_trajectory) {
        assert!((a.pose.translation() - b.pose.translation()).norm() < 1e-9);
    }

    // And the global trajectory matches the metric truth.
    let ate = ate_rmse(&est2.global_trajectory, &truth, Alignment::None).unwrap();
    assert!(ate.rmse_m < 1e-3, "global ATE {}", ate.rmse_m);
}

#[test]
fn scale_refinement_rejects_wrong_modes() {
    let mut config = BackendConfig::default();
    config.stations = station_specs(&exact_stations(), true, Some(EXACT_WEIGHT));
    let mut metric = Backend::new(
        PipelineMode::range_scaled_known(),
        config.clone(),
        0.0,
        &[],
    )
    .unwrap();
    assert!(matches!(
        metric.scale_refinement(),
        Err(PipelineError::NotMonocular)
    ));

    let mut mono = Backend::new(PipelineMode::monocular_known(), config, 0.0, &[]).unwrap();
    assert!(matches!(
        mono.scale_refinement(),
        Err(PipelineError::NoToaFactors)
    ));
}

// ---------------------------------------------------------------------------
// unknown stations

#[test]
fn unknown_stations_initialize_near_their_true_positions() {
    let truth = box_truth(40.0);
    let odometry = noiseless_odometry(&truth);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 13);

    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, false, Some(EXACT_WEIGHT));
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;
    let mode = PipelineMode {
        sensor: SensorMode::RangeScaled,
        stations: StationMode::Unknown,
        loop_closure: false,
    };
    let start = odometry[0].from_time;
    let window = config.toa_association_window;
    let mut backend =
        Backend::new(mode, config, start, &toa_near(&toa, start, window)).unwrap();

    // Drive a few keyframes: stations should still be waiting for geometry.
    drive_tracking(&mut backend, &odometry[..40], &toa);
    assert!(!backend.is_station_initialized(1) || backend.keyframe_count() > 4);

    drive_tracking(&mut backend, &odometry[40..], &toa);
    backend.global_map_refinement().unwrap();

    // With the transform fixed at the identity, the global frame is the
    // odometry frame: stations must appear at their odometry-frame spots.
    let anchor = truth[0].pose.inverse();
    for s in &stations {
        let expected = anchor.transform_point(&s.position);
        let estimated = backend
            .station_position(s.id)
            .unwrap_or_else(|| panic!("station {} never initialized", s.id));
        assert!(
            (estimated - expected).norm() < 0.01,
            "station {}: estimated {:?} expected {:?}",
            s.id,
            estimated,
            expected
        );
    }
}

#[test]
fn unknown_mode_keeps_transform_and_metric_scale_fixed() {
    let truth = box_truth(30.0);
    let odometry = noiseless_odometry(&truth);
    let stations = exact_stations();
    let toa = simulate_toa(&truth, &stations, 10.0, 14);
    let mut config = BackendConfig::default();
    config.stations = station_specs(&stations, false, Some(EXACT_WEIGHT));
    config.odometry_translation_sigma = 1e-4;
    config.odometry_rotation_sigma = 1e-4;
    let mode = PipelineMode {
        sensor: SensorMode::RangeScaled,
        stations: StationMode::Unknown,
        loop_closure: false,
    };
    let estimate = run_backend(&odometry, &toa, mode, &config).unwrap();

    assert_eq!(estimate.scale, 1.0);
    assert!(estimate.t_go.rotation().angle() < 1e-15);
    assert!(estimate.t_go.translation().norm() < 1e-15);
    // All four stations were picked up along the way.
    assert_eq!(estimate.stations.len(), 4);
}

#[test]
fn trilateration_solves_good_geometry_and_rejects_degenerate() {
    let target = Vector3::new(2.0, -1.0, 3.0);
    let spread = [
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(4.0, 0.0, 1.0),
        Vector3::new(0.0, 5.0, 0.5),
        Vector3::new(-3.0, 2.0, 2.0),
        Vector3::new(1.0, -4.0, 1.5),
    ];
    let points: Vec<(Vector3<f64>, f64)> = spread
        .iter()
        .map(|p| (*p, (p - target).norm()))
        .collect();
    let solved = trilaterate(&points).expect("good geometry must solve");
    assert_relative_eq!(solved, target, epsilon = 1e-9);

    // Observers on a straight line cannot fix the off-axis components.
    let line: Vec<(Vector3<f64>, f64)> = (0..6)
        .map(|i| {
            let p = Vector3::new(i as f64, 0.0, 0.0);
            (p, (p - target).norm())
        })
        .collect();
    assert!(trilaterate(&line).is_none());

    // Too few observations never solve.
    assert!(trilaterate(&points[..3]).is_none());
}

// ---------------------------------------------------------------------------
// loop closures

#[test]
fn loop_closures_tighten_a_revisited_path() {
    let truth = box_truth(45.0);
    let model = OdometryNoiseModel {
        translation_sigma: 0.01,
        rotation_sigma: 0.003,
        ..OdometryNoiseModel::default()
    };
    let odometry = corrupt_odometry(&truth, &model, 21);

    let run = |loop_closure: bool| -> (f64, usize) {
        let mut config = BackendConfig::default();
        config.odometry_translation_sigma = BackendConfig::keyframe_sigma(0.01, 10);
        config.odometry_rotation_sigma = BackendConfig::keyframe_sigma(0.003, 10);
        config.loop_closure_truth = Some(truth.clone());
        config.loop_closure_seed = 99;
        let mode = PipelineMode::range_scaled_known().with_loop_closure(loop_closure);
        let mut backend = Backend::new(mode, config, 0.0, &[]).unwrap();
        drive_tracking(&mut backend, &odometry, &[]);
        backend.global_map_refinement().unwrap();
        let est = backend.estimate();
        let local = local_truth(&truth);
        let ate = ate_rmse(&est.keyframes, &local, Alignment::Se3)
            .unwrap()
            .rmse_m;
        (ate, backend.graph.factor_count())
    };

    let (ate_without, factors_without) = run(false);
    let (ate_with, factors_with) = run(true);
    assert!(
        factors_with > factors_without,
        "no loop-closure edges were added"
    );
    assert!(
        ate_with < ate_without,
        "loop closures did not help: {ate_without} -> {ate_with}"
    );
}

// ---------------------------------------------------------------------------
// visibility schedules and stream validation

#[test]
fn visibility_schedule_filters_measurements() {
    let stream: Vec<ToaMeasurement> = (0..120)
        .flat_map(|i| {
            (1..=3u32).map(move |id| ToaMeasurement {
                time: i as f64,
                station_id: id,
                range_m: 5.0,
            })
        })
        .collect();

    // Full coverage keeps everything, order included.
    let full: Vec<(u32, Vec<(f64, f64)>)> =
        (1..=3).map(|id| (id, vec![(0.0, 1e9)])).collect();
    assert_eq!(apply_visibility_schedule(&stream, &full), stream);

    // An empty schedule silences every station.
    assert!(apply_visibility_schedule(&stream, &[]).is_empty());

    // The sequential schedule keeps each station only inside its window,
    // with half-open boundaries.
    let schedule = crate::simulate::presets::sequential_schedule();
    let filtered = apply_visibility_schedule(&stream, &schedule);
    assert!(!filtered.is_empty());
    for m in &filtered {
        let (_, intervals) = schedule
            .iter()
            .find(|(id, _)| *id == m.station_id)
            .unwrap();
        assert!(intervals
            .iter()
            .any(|&(s, e)| m.time >= s && m.time < e));
    }
    assert!(filtered
        .iter()
        .any(|m| m.station_id == 1 && m.time == 10.0));
    assert!(!filtered.iter().any(|m| m.station_id == 1 && m.time == 40.0));
    assert!(!filtered.iter().any(|m| m.time < 10.0));
}

#[test]
fn streams_are_validated_before_running() {
    let config = BackendConfig::default();
    let mode = PipelineMode::range_scaled_known();
    assert!(matches!(
        run_backend(&[], &[], mode, &config),
        Err(PipelineError::EmptyStream)
    ));

    let step = |from: f64, to: f64| OdometryStep {
        from_time: from,
        to_time: to,
        delta: RigidTransform::identity(),
    };
    assert!(matches!(
        run_backend(&[step(0.0, 0.0)], &[], mode, &config),
        Err(PipelineError::NonMonotonicTimestamps(_))
    ));
    assert!(matches!(
        run_backend(&[step(0.0, 1.0), step(0.5, 1.5)], &[], mode, &config),
        Err(PipelineError::NonMonotonicTimestamps(_))
    ));

    let bad_toa = [
        ToaMeasurement {
            time: 2.0,
            station_id: 1,
            range_m: 5.0,
        },
        ToaMeasurement {
            time: 1.0,
            station_id: 1,
            range_m: 5.0,
        },
    ];
    assert!(matches!(
        run_backend(&[step(0.0, 1.0)], &bad_toa, mode, &config),
        Err(PipelineError::NonMonotonicTimestamps(_))
    ));
}

#[test]
fn unconfigured_stations_and_missing_positions_are_rejected() {
    // A measurement for a station the back end never heard of.
    let mut config = BackendConfig::default();
    config.stations = vec![StationSpec {
        id: 1,
        sigma_m: 0.1,
        position: Some(Vector3::new(10.0, 0.0, 0.0)),
    }];
    let toa = [ToaMeasurement {
        time: 0.0,
        station_id: 99,
        range_m: 5.0,
    }];
    match Backend::new(PipelineMode::range_scaled_known(), config.clone(), 0.0, &toa) {
        Err(PipelineError::UnknownStation(99)) => {}
        Err(other) => panic!("expected UnknownStation, got {other:?}"),
        Ok(_) => panic!("expected UnknownStation, got a back end"),
    }

    // Known-station mode demands a surveyed position.
    config.stations[0].position = None;
    match Backend::new(PipelineMode::range_scaled_known(), config, 0.0, &[]) {
        Err(PipelineError::MissingPosition(1)) => {}
        Err(other) => panic!("expected MissingPosition, got {other:?}"),
        Ok(_) => panic!("expected MissingPosition, got a back end"),
    }
}
