//! Recover metric scale for monocular odometry from range measurements.
//!
//! Monocular visual odometry delivers a map in arbitrary units. Here the
//! simulated odometry is pre-shrunk or pre-grown by a known factor; ranges to
//! the four surveyed stations carry the metric information, and the back-end
//! jointly estimates the map-to-metric scale alongside the trajectory. The
//! recovered scale should be the reciprocal of the injected drift factor.
//!
//! Run with: `cargo run --example monocular_scale_recovery`

use toa_slam::cli::experiments::{run_scenario, RunOptions};
use toa_slam::pipeline::{PipelineMode, SensorMode};
use toa_slam::simulate::presets::named_scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!(
        "{:>6} {:>15} {:>15} {:>11} {:>14} {:>14}",
        "drift", "expected scale", "recovered", "error", "ATE sim3 [m]", "ATE se3 [m]"
    );

    for drift in [0.5, 2.0] {
        let mut scenario = named_scenario("aerolab_78ghz", 11).expect("bundled preset");
        scenario.mode = PipelineMode::monocular_known();
        scenario.odometry.scale_drift = drift;

        let output = run_scenario(&scenario, &RunOptions::default())?;
        let report = &output.report;
        assert_eq!(report.sensor, SensorMode::Monocular);

        println!(
            "{:>6} {:>15.3} {:>15.4} {:>10.2}% {:>14.3} {:>14.3}",
            drift,
            1.0 / drift,
            report.recovered_scale.expect("monocular run estimates scale"),
            report.scale_error_pct.expect("truth known in simulation"),
            report.local_ate_sim3_m.expect("monocular convention"),
            report.local_ate_se3_m,
        );
    }

    println!("\nthe similarity-aligned error stays low even before the scale has");
    println!("fully converged, while the rigid-aligned error charges the residual");
    println!("scale mismatch to the trajectory.");

    Ok(())
}
