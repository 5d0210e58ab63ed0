//! Bundled scenario presets: the reference-lab station survey with measured
//! per-station noise statistics at two carrier frequencies, a single-anchor
//! ultra-wideband setup, a sequential-visibility schedule, and the five
//! station layouts used by the geometry (GDOP) study.

use super::{
    BaseStation, FrequencyPreset, OdometryNoiseModel, ScenarioConfig, StationConfig,
    TrajectorySource,
};
use crate::pipeline::PipelineMode;
use nalgebra::Vector3;

/// Surveyed station positions of the reference lab (meters, global frame).
pub fn aerolab_station_positions() -> [Vector3<f64>; 4] {
    [
        Vector3::new(2.5, -2.5, 4.5),
        Vector3::new(2.5, 2.5, 4.0),
        Vector3::new(-2.5, 2.5, 5.0),
        Vector3::new(-6.5, -2.5, 2.0),
    ]
}

/// Reference-lab stations with the measured 78 GHz (400 MHz bandwidth)
/// per-station noise statistics.
pub fn aerolab_78ghz() -> Vec<BaseStation> {
    let pos = aerolab_station_positions();
    vec![
        BaseStation::new(1, pos[0], 0.1958, -0.0271),
        BaseStation::new(2, pos[1], 0.1944, 0.0134),
        BaseStation::new(3, pos[2], 0.1910, 0.0031),
        BaseStation::new(4, pos[3], 0.1425, -0.0172),
    ]
}

/// Reference-lab stations with the measured 28 GHz (200 MHz bandwidth)
/// per-station noise statistics.
pub fn aerolab_28ghz() -> Vec<BaseStation> {
    let pos = aerolab_station_positions();
    vec![
        BaseStation::new(1, pos[0], 0.3292, 0.0420),
        BaseStation::new(2, pos[1], 0.3605, -0.0121),
        BaseStation::new(3, pos[2], 0.3199, 0.0419),
        BaseStation::new(4, pos[3], 0.4132, 0.0828),
    ]
}

/// Single distant ultra-wideband anchor: one station at (10, 10, 10) with
/// σ = 5 cm, zero-mean noise, ranged at 5 Hz.
pub fn uwbvo_station() -> BaseStation {
    BaseStation::new(1, Vector3::new(10.0, 10.0, 10.0), 0.05, 0.0)
}

/// Visibility schedule where three stations come online one after another:
/// BS1 over [10, 40) s, BS2 over [50, 70) s, BS3 over [80, 100) s.
pub fn sequential_schedule() -> Vec<(u32, Vec<(f64, f64)>)> {
    vec![
        (1, vec![(10.0, 40.0)]),
        (2, vec![(50.0, 70.0)]),
        (3, vec![(80.0, 100.0)]),
    ]
}

/// The five station layouts of the geometry study, in the order reported
/// (best to worst global accuracy).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StationLayout {
    Tetrahedral,
    ZShape,
    Asymmetric,
    Diamond,
    Clustered,
}

impl StationLayout {
    pub fn all() -> [StationLayout; 5] {
        [
            StationLayout::Tetrahedral,
            StationLayout::ZShape,
            StationLayout::Asymmetric,
            StationLayout::Diamond,
            StationLayout::Clustered,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            StationLayout::Tetrahedral => "tetrahedral",
            StationLayout::ZShape => "zshape",
            StationLayout::Asymmetric => "asymmetric",
            StationLayout::Diamond => "diamond",
            StationLayout::Clustered => "clustered",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::all().into_iter().find(|l| l.name() == name)
    }

    /// Station positions (meters). Tetrahedral mixes ceiling and ground,
    /// Z-Shape alternates heights diagonally, Asymmetric is irregular,
    /// Diamond sits evenly at two heights, Clustered is co-planar on one
    /// wall.
    pub fn positions(&self) -> [Vector3<f64>; 4] {
        match self {
            StationLayout::Tetrahedral => [
                Vector3::new(0.0, 0.0, 3.0),
                Vector3::new(-4.0, -4.0, 0.0),
                Vector3::new(4.0, -4.0, 0.0),
                Vector3::new(0.0, 4.0, 0.0),
            ],
            StationLayout::ZShape => [
                Vector3::new(-5.0, -5.0, 0.5),
                Vector3::new(5.0, -5.0, 3.0),
                Vector3::new(-5.0, 5.0, 3.0),
                Vector3::new(5.0, 5.0, 0.5),
            ],
            StationLayout::Asymmetric => [
                Vector3::new(-5.0, -2.0, 3.0),
                Vector3::new(2.0, -5.0, 1.0),
                Vector3::new(5.0, 3.0, 2.0),
                Vector3::new(-1.0, 5.0, 0.5),
            ],
            StationLayout::Diamond => [
                Vector3::new(0.0, -5.0, 0.5),
                Vector3::new(5.0, 0.0, 1.0),
                Vector3::new(0.0, 5.0, 0.5),
                Vector3::new(-5.0, 0.0, 1.0),
            ],
            StationLayout::Clustered => [
                Vector3::new(-5.0, -3.0, 1.0),
                Vector3::new(-5.0, -1.0, 2.0),
                Vector3::new(-5.0, 1.0, 1.0),
                Vector3::new(-5.0, 3.0, 2.0),
            ],
        }
    }

    /// Layout stations with a uniform noise model.
    pub fn stations(&self, sigma_m: f64, bias_m: f64) -> Vec<BaseStation> {
        self.positions()
            .iter()
            .enumerate()
            .map(|(i, p)| BaseStation::new(i as u32 + 1, *p, sigma_m, bias_m))
            .collect()
    }
}

/// A closed waypoint loop exercising all three axes inside the default
/// flight volume. Starts and ends at the same point so loop-closure
/// scenarios have a genuine revisit.
pub fn box_waypoints() -> Vec<[f64; 3]> {
    vec![
        [0.0, -2.0, 1.0],
        [2.0, -2.0, 1.5],
        [2.0, 2.0, 2.5],
        [-2.0, 2.0, 3.5],
        [-2.0, -2.0, 2.5],
        [1.5, -1.5, 1.8],
        [1.5, 1.5, 2.6],
        [-1.5, 1.5, 1.6],
        [-1.5, -1.5, 1.2],
        [0.0, -2.0, 1.0],
    ]
}

/// Waypoint loop for the station-geometry study: same footprint as
/// [`box_waypoints`] but flown low (z ≤ 2 m), like a motion-capture-room
/// flight under ceiling-mounted anchors. The study layouts place stations up
/// to 3 m high inside the volume; flying above them would sample the
/// geometry from the far side and no longer reflect how those layouts are
/// used.
pub fn gdop_study_waypoints() -> Vec<[f64; 3]> {
    vec![
        [0.0, -2.0, 0.6],
        [2.0, -2.0, 0.9],
        [2.0, 2.0, 1.5],
        [-2.0, 2.0, 2.0],
        [-2.0, -2.0, 1.5],
        [1.5, -1.5, 1.1],
        [1.5, 1.5, 1.6],
        [-1.5, 1.5, 1.0],
        [-1.5, -1.5, 0.7],
        [0.0, -2.0, 0.6],
    ]
}

fn station_configs(stations: &[BaseStation]) -> Vec<StationConfig> {
    stations
        .iter()
        .map(|s| StationConfig {
            id: s.id,
            position: [s.position.x, s.position.y, s.position.z],
            sigma_m: Some(s.sigma_m),
            bias_m: Some(s.bias_m),
            intervals: s.intervals.clone(),
        })
        .collect()
}

/// 120 s flight through the box with the four reference-lab stations at the
/// given carrier frequency's measured noise.
pub fn aerolab_scenario(freq: FrequencyPreset, mode: PipelineMode, seed: u64) -> ScenarioConfig {
    let stations = match freq {
        FrequencyPreset::Ghz28 => aerolab_28ghz(),
        FrequencyPreset::Ghz78 => aerolab_78ghz(),
    };
    ScenarioConfig {
        trajectory: TrajectorySource {
            waypoints: Some(box_waypoints()),
            file: None,
        },
        duration_s: 120.0,
        odometry_rate_hz: 20.0,
        toa_rate_hz: 10.0,
        frequency: Some(freq),
        stations: station_configs(&stations),
        odometry: OdometryNoiseModel {
            translation_sigma: 0.004,
            rotation_sigma: 0.001,
            scale_drift: 1.0,
            random_walk_bias: false,
        },
        mode,
        seed,
    }
}

/// 110 s monocular flight where three 78 GHz-class stations with unknown
/// positions appear one after another per [`sequential_schedule`].
pub fn sequential_3bs_scenario(seed: u64) -> ScenarioConfig {
    let schedule = sequential_schedule();
    let mut stations = aerolab_78ghz();
    stations.truncate(3);
    for s in &mut stations {
        let (_, intervals) = schedule
            .iter()
            .find(|(id, _)| *id == s.id)
            .expect("schedule covers station");
        s.intervals = intervals.clone();
    }
    ScenarioConfig {
        trajectory: TrajectorySource {
            waypoints: Some(box_waypoints()),
            file: None,
        },
        duration_s: 110.0,
        odometry_rate_hz: 20.0,
        toa_rate_hz: 10.0,
        frequency: Some(FrequencyPreset::Ghz78),
        stations: station_configs(&stations),
        odometry: OdometryNoiseModel {
            translation_sigma: 0.004,
            rotation_sigma: 0.001,
            scale_drift: 0.5,
            random_walk_bias: false,
        },
        mode: PipelineMode::monocular_unknown(),
        seed,
    }
}

/// 120 s flight ranged by the single distant ultra-wideband anchor at 5 Hz.
pub fn uwbvo_mh_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        trajectory: TrajectorySource {
            waypoints: Some(box_waypoints()),
            file: None,
        },
        duration_s: 120.0,
        odometry_rate_hz: 20.0,
        toa_rate_hz: 5.0,
        frequency: None,
        stations: station_configs(&[uwbvo_station()]),
        odometry: OdometryNoiseModel {
            translation_sigma: 0.004,
            rotation_sigma: 0.001,
            scale_drift: 1.0,
            random_walk_bias: false,
        },
        mode: PipelineMode::range_scaled_known(),
        seed,
    }
}

/// Look up a bundled scenario by its preset name.
pub fn named_scenario(name: &str, seed: u64) -> Option<ScenarioConfig> {
    match name {
        "aerolab_28ghz" => Some(aerolab_scenario(
            FrequencyPreset::Ghz28,
            PipelineMode::range_scaled_known(),
            seed,
        )),
        "aerolab_78ghz" => Some(aerolab_scenario(
            FrequencyPreset::Ghz78,
            PipelineMode::range_scaled_known(),
            seed,
        )),
        "sequential_3bs" => Some(sequential_3bs_scenario(seed)),
        "uwbvo_mh" => Some(uwbvo_mh_scenario(seed)),
        _ => None,
    }
}

/// Names accepted by [`named_scenario`].
pub const PRESET_NAMES: [&str; 4] = [
    "aerolab_28ghz",
    "aerolab_78ghz",
    "sequential_3bs",
    "uwbvo_mh",
];
