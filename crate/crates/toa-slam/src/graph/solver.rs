//! Levenberg–Marquardt with additive diagonal damping.
//!
//! Each outer iteration linearizes all factors (plus prior terms) once, then
//! searches over the damping parameter for a cost-decreasing step. The normal
//! equations are assembled densely below `sparse_threshold` free dofs and as
//! a sparse LDLᵀ system above it, with free variables ordered so that the
//! chain-sparse pose blocks are eliminated before the densely connected
//! global variables (stations, biases, frame transform, scale).

use super::{
    ConvergenceReason, Graph, GraphError, OptimizeReport, OptimizeSettings, Value,
    DAMPING_CEILING, DAMPING_FLOOR, DAMPING_STEP,
};
use nalgebra::{DMatrix, DVector};
use sprs::TriMat;
use sprs_ldl::Ldl;

/// Elimination rank: sparse chain variables first, hub variables last.
fn ordering_rank(value: &Value) -> u8 {
    match value {
        Value::Pose(_) => 0,
        Value::StationPosition(_) => 1,
        Value::Bias(_) => 2,
        Value::Transform(_) => 3,
        Value::Scale(_) => 4,
    }
}

struct Layout {
    /// Free variable indices in elimination order.
    order: Vec<usize>,
    /// Tangent offset per variable index (usize::MAX when fixed).
    offset: Vec<usize>,
    /// Total free tangent dimension.
    dim: usize,
}

fn build_layout(graph: &Graph) -> Option<Layout> {
    let nodes = graph.nodes();
    let mut order: Vec<usize> = (0..nodes.len()).filter(|&i| !nodes[i].fixed()).collect();
    if order.is_empty() {
        return None;
    }
    order.sort_by_key(|&i| (ordering_rank(nodes[i].value()), i));
    let mut offset = vec![usize::MAX; nodes.len()];
    let mut dim = 0;
    for &i in &order {
        offset[i] = dim;
        dim += nodes[i].value().dof();
    }
    Some(Layout { order, offset, dim })
}

enum Normal {
    Dense(DMatrix<f64>),
    Triplets(Vec<(usize, usize, f64)>),
}

impl Normal {
    fn add_block(&mut self, r0: usize, c0: usize, block: &DMatrix<f64>) {
        match self {
            Normal::Dense(h) => {
                let mut view = h.view_mut((r0, c0), (block.nrows(), block.ncols()));
                view += block;
            }
            Normal::Triplets(t) => {
                for c in 0..block.ncols() {
                    for r in 0..block.nrows() {
                        let v = block[(r, c)];
                        if v != 0.0 {
                            t.push((r0 + r, c0 + c, v));
                        }
                    }
                }
            }
        }
    }
}

/// Robustified total cost of the candidate assignment `values` (factor terms
/// plus prior terms of free variables).
pub(crate) fn total_cost(graph: &Graph, values: &[Value]) -> Result<f64, GraphError> {
    let mut cost = 0.0;
    let mut buffer: Vec<Value> = Vec::new();
    for edge in graph.edges() {
        buffer.clear();
        buffer.extend(
            edge.residual_fn()
                .variables()
                .iter()
                .map(|v| values[v.0].clone()),
        );
        let e = edge.residual_fn().residual(&buffer)?;
        let sq = (e.transpose() * edge.information() * &e)[(0, 0)];
        cost += edge.kernel().cost(sq);
    }
    for (node, value) in graph.nodes().iter().zip(values) {
        if node.fixed() {
            continue;
        }
        if let Some((mean, info)) = node.prior_terms() {
            let e = value.local_difference(mean);
            cost += (e.transpose() * info * &e)[(0, 0)];
        }
    }
    Ok(cost)
}

fn linearize(
    graph: &Graph,
    values: &[Value],
    layout: &Layout,
    sparse: bool,
) -> Result<(Normal, DVector<f64>), GraphError> {
    let n = layout.dim;
    let mut h = if sparse {
        Normal::Triplets(Vec::new())
    } else {
        Normal::Dense(DMatrix::zeros(n, n))
    };
    let mut b = DVector::zeros(n);
    let mut buffer: Vec<Value> = Vec::new();

    for edge in graph.edges() {
        let vars = edge.residual_fn().variables();
        if vars.iter().all(|v| layout.offset[v.0] == usize::MAX) {
            continue;
        }
        buffer.clear();
        buffer.extend(vars.iter().map(|v| values[v.0].clone()));
        let (e, jacobians) = edge.residual_fn().residual_and_jacobians(&buffer)?;
        let omega = edge.information();
        let sq = (e.transpose() * omega * &e)[(0, 0)];
        let w = edge.kernel().weight(sq);

        let weighted: Vec<Option<DMatrix<f64>>> = vars
            .iter()
            .zip(&jacobians)
            .map(|(v, j)| {
                if layout.offset[v.0] == usize::MAX {
                    None
                } else {
                    Some(omega * j * w)
                }
            })
            .collect();

        for (a, ja) in jacobians.iter().enumerate() {
            let ra = layout.offset[vars[a].0];
            if ra == usize::MAX {
                continue;
            }
            let grad = ja.transpose() * (omega * &e) * w;
            let mut seg = b.rows_mut(ra, ja.ncols());
            seg += grad;
            for (bb, wjb) in weighted.iter().enumerate() {
                let Some(wjb) = wjb else { continue };
                let cb = layout.offset[vars[bb].0];
                if bb < a {
                    continue;
                }
                let block = ja.transpose() * wjb;
                h.add_block(ra, cb, &block);
                if bb != a {
                    h.add_block(cb, ra, &block.transpose());
                }
            }
        }
    }

    for &i in &layout.order {
        let node = &graph.nodes()[i];
        if let Some((mean, info)) = node.prior_terms() {
            let j = values[i].local_difference_jacobian(mean);
            let e = values[i].local_difference(mean);
            let off = layout.offset[i];
            h.add_block(off, off, &(j.transpose() * info * &j));
            let grad = j.transpose() * (info * &e);
            let mut seg = b.rows_mut(off, j.ncols());
            seg += grad;
        }
    }

    Ok((h, b))
}

fn solve_damped(h: &Normal, b: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = b.len();
    let solution = match h {
        Normal::Dense(m) => {
            let mut damped = m.clone();
            for i in 0..n {
                damped[(i, i)] += lambda;
            }
            damped.cholesky().map(|ch| ch.solve(&(-b)))?
        }
        Normal::Triplets(entries) => {
            let mut tri = TriMat::with_capacity((n, n), entries.len() + n);
            for &(r, c, v) in entries {
                tri.add_triplet(r, c, v);
            }
            for i in 0..n {
                tri.add_triplet(i, i, lambda);
            }
            let csc = tri.to_csc::<usize>();
            let ldl = Ldl::new()
                .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
                .fill_in_reduction(sprs::FillInReduction::NoReduction)
                .numeric(csc.view())
                .ok()?;
            let rhs: Vec<f64> = (-b).iter().copied().collect();
            DVector::from_vec(ldl.solve(&rhs))
        }
    };
    if solution.iter().all(|x| x.is_finite()) {
        Some(solution)
    } else {
        None
    }
}

fn apply_step(values: &[Value], layout: &Layout, delta: &DVector<f64>) -> Vec<Value> {
    let mut out = values.to_vec();
    for &i in &layout.order {
        let off = layout.offset[i];
        let dof = values[i].dof();
        out[i] = values[i].retract(&delta.as_slice()[off..off + dof]);
    }
    out
}

pub(crate) fn optimize(
    graph: &mut Graph,
    settings: &OptimizeSettings,
) -> Result<OptimizeReport, GraphError> {
    let layout = build_layout(graph).ok_or(GraphError::NoFreeVariables)?;
    let sparse = layout.dim >= settings.sparse_threshold;

    let mut values: Vec<Value> = graph.nodes().iter().map(|n| n.value().clone()).collect();
    let mut cost = total_cost(graph, &values)?;
    let initial_cost = cost;
    let mut lambda = settings.initial_damping;
    let mut iterations = 0;
    let mut reason = ConvergenceReason::MaxIterations;

    for iter in 0..settings.max_iterations {
        let (h, b) = linearize(graph, &values, &layout, sparse)?;
        if b.amax() <= settings.gradient_tolerance {
            reason = ConvergenceReason::Gradient;
            break;
        }

        let mut accepted = false;
        let mut solved_any = false;
        while lambda <= DAMPING_CEILING {
            let Some(delta) = solve_damped(&h, &b, lambda) else {
                lambda *= DAMPING_STEP;
                continue;
            };
            solved_any = true;
            let candidate = apply_step(&values, &layout, &delta);
            let candidate_cost = total_cost(graph, &candidate)?;
            if candidate_cost.is_finite() && candidate_cost < cost {
                values = candidate;
                cost = candidate_cost;
                lambda = (lambda / DAMPING_STEP).max(DAMPING_FLOOR);
                iterations = iter + 1;
                accepted = true;
                if delta.norm() <= settings.step_tolerance {
                    reason = ConvergenceReason::Step;
                }
                break;
            }
            lambda *= DAMPING_STEP;
        }

        if !accepted {
            if !solved_any {
                return Err(GraphError::SingularSystem);
            }
            // No cost-decreasing step exists at any damping: converged as
            // tightly as the linearization allows.
            reason = ConvergenceReason::Step;
            break;
        }
        if reason == ConvergenceReason::Step {
            break;
        }
    }

    for (node, value) in graph.nodes_mut().iter_mut().zip(values) {
        if !node.fixed() {
            node.set_value(value);
        }
    }
    graph.mark_optimized();
    Ok(OptimizeReport {
        iterations,
        initial_cost,
        final_cost: cost,
        reason,
        marginals_updated: false,
    })
}
