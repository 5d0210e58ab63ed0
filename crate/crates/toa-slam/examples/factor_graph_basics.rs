//! Build a tiny pose graph by hand and optimize it.
//!
//! Three poses walk along the x axis. Odometry between them is slightly
//! wrong, and a tighter "loop" measurement from the first to the last pose
//! pulls the chain back toward the truth. The example also runs the built-in
//! finite-difference check against one factor's analytic Jacobians.
//!
//! Run with: `cargo run --example factor_graph_basics`

use nalgebra::{DMatrix, Vector3};
use toa_slam::factors::{PriorFactor, RelativePoseFactor};
use toa_slam::geometry::RigidTransform;
use toa_slam::graph::{
    numeric_jacobian_check, FactorEdge, Graph, OptimizeSettings, RobustKernel, Value,
};

fn step_x(meters: f64) -> RigidTransform {
    RigidTransform::from_translation(Vector3::new(meters, 0.0, 0.0))
}

/// Isotropic 6-dof information for a pose residual with standard deviation
/// `sigma` on every tangent component.
fn pose_information(sigma: f64) -> DMatrix<f64> {
    DMatrix::identity(6, 6) / (sigma * sigma)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut graph = Graph::new();

    // Truth: poses at x = 0, 1, 2. Initial guesses are deliberately off.
    let p0 = graph.add_variable(Value::Pose(RigidTransform::identity()), false)?;
    let p1 = graph.add_variable(Value::Pose(step_x(0.7)), false)?;
    let p2 = graph.add_variable(Value::Pose(step_x(2.6)), false)?;

    // Anchor the first pose with a tight prior (gauge freedom removal).
    graph.add_factor(FactorEdge::new(
        Box::new(PriorFactor::new(p0, Value::Pose(RigidTransform::identity()))),
        pose_information(1e-4),
        RobustKernel::None,
    ));

    // Odometry measurements, each about 3% off.
    graph.add_factor(FactorEdge::new(
        Box::new(RelativePoseFactor::new(p0, p1, step_x(1.03))),
        pose_information(0.05),
        RobustKernel::None,
    ));
    graph.add_factor(FactorEdge::new(
        Box::new(RelativePoseFactor::new(p1, p2, step_x(0.96))),
        pose_information(0.05),
        RobustKernel::None,
    ));

    // A loop measurement spanning the whole chain, trusted three times more.
    graph.add_factor(FactorEdge::new(
        Box::new(RelativePoseFactor::new(p0, p2, step_x(2.00))),
        pose_information(0.05 / 3.0),
        RobustKernel::Huber { delta: 2.0 },
    ));

    println!(
        "graph: {} variables, {} factors",
        graph.variable_count(),
        graph.factor_count()
    );
    println!("cost before: {:.6}", graph.current_cost()?);

    let report = graph.optimize(&OptimizeSettings::default())?;
    println!(
        "optimized in {} iterations ({:?}): cost {:.6} -> {:.6}",
        report.iterations, report.reason, report.initial_cost, report.final_cost
    );

    for (name, key, truth_x) in [("p0", p0, 0.0), ("p1", p1, 1.0), ("p2", p2, 2.0)] {
        let t = graph.value(key).as_pose().translation();
        println!(
            "  {name}: x = {:+.4} (truth {truth_x:+.1}, error {:+.1} mm)",
            t.x,
            (t.x - truth_x) * 1e3
        );
    }

    // Verify the relative-pose Jacobians against central finite differences
    // at the optimized state.
    let factor = RelativePoseFactor::new(p0, p1, step_x(1.03));
    let values = [graph.value(p0).clone(), graph.value(p1).clone()];
    let worst = numeric_jacobian_check(&factor, &values, 1e-6)?;
    println!("max analytic-vs-numeric Jacobian deviation: {worst:.2e}");

    Ok(())
}
