use super::*;
use crate::geometry::Twist;
use crate::simulate::presets::aerolab_scenario;
use crate::simulate::FrequencyPreset;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn random_trajectory(n: usize, seed: u64) -> Vec<TimedPose> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let xi = Twist::new(
                Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0)),
            );
            TimedPose::new(i as f64 * 0.05, RigidTransform::exp(&xi))
        })
        .collect()
}

#[test]
fn tum_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.tum");
    let trajectory = random_trajectory(50, 7);
    write_tum(&path, &trajectory).unwrap();
    let read = read_tum(&path).unwrap();
    assert_eq!(read.len(), trajectory.len());
    for (a, b) in trajectory.iter().zip(&read) {
        assert!((a.time - b.time).abs() < 1e-9);
        assert!(a.pose.translation_distance_to(&b.pose) < 1e-8);
        assert!(a.pose.rotation_angle_to(&b.pose) < 1e-8);
    }
}

#[test]
fn tum_reader_skips_comments_and_blank_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.tum");
    std::fs::write(
        &path,
        "# header comment\n\n0.0 1.0 2.0 3.0 0.0 0.0 0.0 1.0\n\n# trailing\n",
    )
    .unwrap();
    let read = read_tum(&path).unwrap();
    assert_eq!(read.len(), 1);
    assert_eq!(read[0].pose.translation(), Vector3::new(1.0, 2.0, 3.0));
}

#[test]
fn tum_reader_reports_line_numbers_on_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tum");
    std::fs::write(&path, "# ok\n0.0 1.0 2.0 3.0 0.0 0.0 0.0 1.0\n0.05 1.0 2.0\n").unwrap();
    let err = read_tum(&path).unwrap_err();
    match err {
        IoError::Parse { line, message, .. } => {
            assert_eq!(line, 3);
            assert!(message.contains("8 fields"), "got: {message}");
        }
        other => panic!("expected a parse error, got {other}"),
    }

    std::fs::write(&path, "0.0 1.0 2.0 xyz 0.0 0.0 0.0 1.0\n").unwrap();
    let err = read_tum(&path).unwrap_err();
    match err {
        IoError::Parse { line, message, .. } => {
            assert_eq!(line, 1);
            assert!(message.contains("xyz"), "got: {message}");
        }
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn toa_csv_round_trips_and_enforces_its_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ranges.csv");
    let measurements = vec![
        ToaMeasurement {
            time: 0.1,
            station_id: 1,
            range_m: 5.25,
        },
        ToaMeasurement {
            time: 0.2,
            station_id: 42,
            range_m: 3.125,
        },
    ];
    write_toa_csv(&path, &measurements).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("timestamp,station_id,range_m\n"));
    let read = read_toa_csv(&path).unwrap();
    assert_eq!(read.len(), 2);
    assert_eq!(read[1].station_id, 42);
    assert!((read[1].range_m - 3.125).abs() < 1e-9);

    std::fs::write(&path, "time,id,range\n0.1,1,5.0\n").unwrap();
    let err = read_toa_csv(&path).unwrap_err();
    match err {
        IoError::Parse { line, .. } => assert_eq!(line, 1),
        other => panic!("expected a parse error, got {other}"),
    }

    std::fs::write(&path, "timestamp,station_id,range_m\n0.1,1\n").unwrap();
    let err = read_toa_csv(&path).unwrap_err();
    match err {
        IoError::Parse { line, message, .. } => {
            assert_eq!(line, 2);
            assert!(message.contains("3 columns"), "got: {message}");
        }
        other => panic!("expected a parse error, got {other}"),
    }
}

#[test]
fn scenario_toml_round_trips_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.toml");
    let scenario = aerolab_scenario(
        FrequencyPreset::Ghz78,
        crate::pipeline::PipelineMode::range_scaled_known(),
        9,
    );
    save_scenario(&path, &scenario).unwrap();
    let loaded = load_scenario(&path).unwrap();
    assert_eq!(loaded, scenario);

    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("\nbogus_key = 1\n");
    std::fs::write(&path, text).unwrap();
    let err = load_scenario(&path).unwrap_err();
    match err {
        IoError::Config { message, .. } => {
            assert!(message.contains("bogus_key"), "got: {message}");
        }
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn scenario_loading_surfaces_validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.toml");
    let mut scenario = aerolab_scenario(
        FrequencyPreset::Ghz78,
        crate::pipeline::PipelineMode::range_scaled_known(),
        9,
    );
    scenario.duration_s = -1.0;
    save_scenario(&path, &scenario).unwrap();
    let err = load_scenario(&path).unwrap_err();
    match err {
        IoError::Config { message, .. } => {
            assert!(message.contains("duration"), "got: {message}");
        }
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn writers_are_byte_deterministic() {
    let trajectory = random_trajectory(20, 3);
    assert_eq!(format_tum(&trajectory), format_tum(&trajectory));
    let measurements = vec![ToaMeasurement {
        time: 1.0 / 3.0,
        station_id: 7,
        range_m: std::f64::consts::PI,
    }];
    assert_eq!(format_toa_csv(&measurements), format_toa_csv(&measurements));
}

#[test]
fn gdop_csv_lists_samples_and_aggregates() {
    let profile = GdopProfile {
        mean: 2.5,
        max: 3.0,
        samples: vec![(0.0, 2.0), (1.0, 3.0)],
        singular_count: 1,
    };
    let text = format_gdop_csv(&profile);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "timestamp,gdop");
    assert_eq!(lines.len(), 6);
    assert!(lines[3].starts_with("# mean,2.5"));
    assert!(lines[4].starts_with("# max,3.0"));
    assert_eq!(lines[5], "# singular_samples,1");
}

#[test]
fn manifests_round_trip_and_validate_file_existence() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("scenario.toml");
    let truth = dir.path().join("ground_truth.tum");
    std::fs::write(&config, "").unwrap();
    std::fs::write(&truth, "").unwrap();

    let manifest = RunManifest {
        scenario_config: config,
        seed: 11,
        out_dir: dir.path().to_path_buf(),
        artifacts: ManifestArtifacts {
            ground_truth: Some(truth.clone()),
            ..Default::default()
        },
    };
    let path = dir.path().join("manifest.json");
    save_manifest(&path, &manifest).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded, manifest);
    loaded.validate().unwrap();

    std::fs::remove_file(&truth).unwrap();
    let err = loaded.validate().unwrap_err();
    assert!(err.to_string().contains("ground_truth.tum"), "got: {err}");
}
