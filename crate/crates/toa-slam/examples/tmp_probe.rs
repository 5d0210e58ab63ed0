//! Temporary probe: pre-check acceptance thresholds for the sequential
//! scenario regime and tetrahedral-geometry bias recovery.

use toa_slam::cli::experiments::{run_streams, simulate_streams, RunOptions};
use toa_slam::pipeline::PipelineMode;
use toa_slam::simulate::presets::{aerolab_scenario, sequential_3bs_scenario, StationLayout};
use toa_slam::simulate::{FrequencyPreset, ScenarioConfig};

const BIASES_28GHZ: [(u32, f64); 4] = [(1, 0.0420), (2, -0.0121), (3, 0.0419), (4, 0.0828)];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    criterion_6()?;
    criterion_9()?;
    Ok(())
}

/// Sequential unknown stations, monocular: improvement over no-ToA under
/// candidate odometry regimes.
fn criterion_6() -> Result<(), Box<dyn std::error::Error>> {
    for (label, drift, walk) in [
        ("drift 0.95 white", 0.95, false),
        ("drift 0.95 walk", 0.95, true),
    ] {
        let start = std::time::Instant::now();
        let mut improvements = Vec::new();
        for seed in 0..5u64 {
            let mut scenario = sequential_3bs_scenario(seed);
            scenario.odometry.scale_drift = drift;
            scenario.odometry.random_walk_bias = walk;
            let streams = simulate_streams(&scenario)?;
            let opts = RunOptions {
                with_baseline: true,
                ..RunOptions::default()
            };
            let out = run_streams(&scenario, &streams, &opts)?;
            let imp = out
                .report
                .improvement_over_baseline_pct
                .ok_or("missing improvement")?;
            let scale_err = out.report.scale_error_pct.unwrap_or(f64::NAN);
            println!(
                "  [{label}] seed {seed}: local sim3 {:.4} m, improvement {:+.2}%, scale err {:.2}%",
                out.report.comparison_local_ate(),
                imp,
                scale_err
            );
            improvements.push(imp);
        }
        let mean = improvements.iter().sum::<f64>() / improvements.len() as f64;
        println!(
            "criterion 6 [{label}]: mean improvement {mean:+.2}% (gate > 0) in {:?}",
            start.elapsed()
        );
    }
    Ok(())
}

fn bias_scenario(seed: u64) -> ScenarioConfig {
    let mut scenario = aerolab_scenario(
        FrequencyPreset::Ghz78,
        PipelineMode::range_scaled_known(),
        seed,
    );
    let positions = StationLayout::Tetrahedral.positions();
    for ((s, p), (_, bias)) in scenario.stations.iter_mut().zip(positions).zip(BIASES_28GHZ) {
        s.position = [p.x, p.y, p.z];
        s.bias_m = Some(bias);
    }
    scenario
}

/// Per-station bias recovery on surrounding (tetrahedral) geometry.
fn criterion_9() -> Result<(), Box<dyn std::error::Error>> {
    let start = std::time::Instant::now();
    let mut max_noiseless: f64 = 0.0;
    let mut max_noisy: f64 = 0.0;
    for seed in 0..5u64 {
        // Noiseless: generate with microscopic noise, weight the run sanely.
        let mut gen = bias_scenario(seed);
        gen.duration_s = 60.0;
        for s in &mut gen.stations {
            s.sigma_m = Some(1e-6);
        }
        let streams = simulate_streams(&gen)?;
        let mut run_cfg = gen.clone();
        for s in &mut run_cfg.stations {
            s.sigma_m = Some(0.02);
        }
        let out = run_streams(&run_cfg, &streams, &RunOptions::default())?;
        let errs: Vec<f64> = BIASES_28GHZ
            .iter()
            .map(|(id, bias)| (out.estimate.biases[id] - bias).abs())
            .collect();
        let worst = errs.iter().cloned().fold(0.0f64, f64::max);
        max_noiseless = max_noiseless.max(worst);
        println!(
            "  seed {seed} noiseless: errs {:?} mm",
            errs.iter().map(|e| (e * 1000.0).round()).collect::<Vec<_>>()
        );

        // 78 GHz per-station noise, same injected biases.
        let noisy = bias_scenario(seed);
        let streams = simulate_streams(&noisy)?;
        let out = run_streams(&noisy, &streams, &RunOptions::default())?;
        let errs: Vec<f64> = BIASES_28GHZ
            .iter()
            .map(|(id, bias)| (out.estimate.biases[id] - bias).abs())
            .collect();
        let worst = errs.iter().cloned().fold(0.0f64, f64::max);
        max_noisy = max_noisy.max(worst);
        println!(
            "  seed {seed} 78 GHz: errs {:?} mm",
            errs.iter().map(|e| (e * 1000.0).round()).collect::<Vec<_>>()
        );
    }
    println!(
        "criterion 9 [tetrahedral]: max noiseless {:.1} mm (gate 20), max 78 GHz {:.1} mm (gate 50) in {:?}",
        max_noiseless * 1000.0,
        max_noisy * 1000.0,
        start.elapsed()
    );
    Ok(())
}
