//! Sparse factor-graph container and Levenberg–Marquardt optimizer over
//! mixed Euclidean/manifold variables.
//!
//! Variables carry an optional *prior information* matrix (initially zero)
//! anchoring them to their stored prior mean. [`Graph::update_marginal_information`]
//! refreshes that anchor from the factor Jacobians at the current solution,
//! which is how estimates survive between optimization passes without keeping
//! old factors around: a later pass sees earlier evidence as a prior, which
//! also damps aggressive updates from noisy or conflicting new measurements.

mod solver;

use crate::geometry::{se3_right_jacobian_inv, RigidTransform};
use nalgebra::{DMatrix, DVector, Vector3};
use thiserror::Error;

/// Handle to a variable node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableKey(pub(crate) usize);

/// Handle to a factor edge inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactorKey(pub(crate) usize);

/// Current estimate of a variable, tagged by its role in the problem.
///
/// Tangent-space conventions per kind:
/// - `Pose`/`Transform`: 6 dof, right perturbation `T·exp(δ)`, layout
///   `[rotation; translation]`
/// - `Bias`: 1 dof, additive, meters
/// - `Scale`: 1 dof, multiplicative `s·exp(δ)` (log parameterization keeps
///   the stored value positive)
/// - `StationPosition`: 3 dof, additive, meters
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    /// A body pose in the odometry (local) frame.
    Pose(RigidTransform),
    /// The local-to-global frame transform.
    Transform(RigidTransform),
    /// A per-station range bias in meters.
    Bias(f64),
    /// The positive metric scale of the local map.
    Scale(f64),
    /// A station position in the global frame, meters.
    StationPosition(Vector3<f64>),
}

impl Value {
    pub fn dof(&self) -> usize {
        match self {
            Value::Pose(_) | Value::Transform(_) => 6,
            Value::Bias(_) | Value::Scale(_) => 1,
            Value::StationPosition(_) => 3,
        }
    }

    /// Apply a tangent-space increment of length [`Value::dof`].
    pub fn retract(&self, delta: &[f64]) -> Value {
        match self {
            Value::Pose(t) => {
                Value::Pose(t.retract(&nalgebra::Vector6::from_column_slice(delta)))
            }
            Value::Transform(t) => {
                Value::Transform(t.retract(&nalgebra::Vector6::from_column_slice(delta)))
            }
            Value::Bias(b) => Value::Bias(b + delta[0]),
            Value::Scale(s) => Value::Scale(s * delta[0].exp()),
            Value::StationPosition(p) => {
                Value::StationPosition(p + Vector3::from_column_slice(delta))
            }
        }
    }

    /// Tangent-space difference `self ⊖ anchor` consistent with
    /// [`Value::retract`]: `anchor.retract(d) == self` up to numerics.
    pub fn local_difference(&self, anchor: &Value) -> DVector<f64> {
        match (self, anchor) {
            (Value::Pose(x), Value::Pose(m)) | (Value::Transform(x), Value::Transform(m)) => {
                DVector::from_column_slice(m.inverse().compose(x).log().as_vector().as_slice())
            }
            (Value::Bias(x), Value::Bias(m)) => DVector::from_element(1, x - m),
            (Value::Scale(x), Value::Scale(m)) => DVector::from_element(1, (x / m).ln()),
            (Value::StationPosition(x), Value::StationPosition(m)) => {
                DVector::from_column_slice((x - m).as_slice())
            }
            _ => panic!("local_difference between mismatched variable kinds"),
        }
    }

    /// Jacobian of [`Value::local_difference`] w.r.t. a right perturbation of
    /// `self`.
    pub(crate) fn local_difference_jacobian(&self, anchor: &Value) -> DMatrix<f64> {
        match (self, anchor) {
            (Value::Pose(x), Value::Pose(m)) | (Value::Transform(x), Value::Transform(m)) => {
                let xi = m.inverse().compose(x).log();
                let j = se3_right_jacobian_inv(&xi);
                DMatrix::from_iterator(6, 6, j.iter().copied())
            }
            _ => DMatrix::identity(self.dof(), self.dof()),
        }
    }

    pub fn as_pose(&self) -> &RigidTransform {
        match self {
            Value::Pose(t) | Value::Transform(t) => t,
            _ => panic!("variable is not a pose"),
        }
    }

    pub fn as_scalar(&self) -> f64 {
        match self {
            Value::Bias(v) | Value::Scale(v) => *v,
            _ => panic!("variable is not a scalar"),
        }
    }

    pub fn as_point(&self) -> &Vector3<f64> {
        match self {
            Value::StationPosition(p) => p,
            _ => panic!("variable is not a station position"),
        }
    }

    fn same_kind(&self, other: &Value) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

/// Residual evaluation failure; surfaces through optimization untouched.
#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    /// The camera position coincides with the station, leaving the range
    /// direction (and hence the Jacobians) undefined.
    #[error("camera maps onto the station position; range direction undefined")]
    DegenerateRange,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("initial value invalid for its variable kind: {0}")]
    InvalidInitialValue(&'static str),
    #[error("normal equations remain singular at the damping ceiling")]
    SingularSystem,
    #[error("graph has no free variables")]
    NoFreeVariables,
    #[error("marginal information requested before any optimization")]
    NeverOptimized,
    #[error(transparent)]
    Factor(#[from] FactorError),
}

/// A measurement term: a residual function of an ordered set of variables.
///
/// `residual_and_jacobians` returns one `dim × dof` block per connected
/// variable, in the order reported by [`Residual::variables`]. Jacobians are
/// taken w.r.t. each variable's tangent-space perturbation (see [`Value`]).
pub trait Residual: Send + Sync {
    fn dim(&self) -> usize;
    fn variables(&self) -> &[VariableKey];
    fn residual(&self, values: &[Value]) -> Result<DVector<f64>, FactorError>;
    fn residual_and_jacobians(
        &self,
        values: &[Value],
    ) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), FactorError>;
}

/// Loss applied to each factor's squared Mahalanobis norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    None,
    /// Quadratic inside `delta` (in whitened-residual units), linear outside.
    Huber { delta: f64 },
}

impl RobustKernel {
    /// Robustified cost for a squared whitened norm `eᵀΩe`.
    pub fn cost(&self, squared_norm: f64) -> f64 {
        match *self {
            RobustKernel::None => squared_norm,
            RobustKernel::Huber { delta } => {
                let r = squared_norm.sqrt();
                if r <= delta {
                    squared_norm
                } else {
                    delta * (2.0 * r - delta)
                }
            }
        }
    }

    /// Reweighting factor applied to the factor's information matrix.
    pub fn weight(&self, squared_norm: f64) -> f64 {
        match *self {
            RobustKernel::None => 1.0,
            RobustKernel::Huber { delta } => {
                let r = squared_norm.sqrt();
                if r <= delta {
                    1.0
                } else {
                    delta / r
                }
            }
        }
    }
}

/// A residual bound to its information matrix (inverse measurement
/// covariance) and robust kernel.
pub struct FactorEdge {
    residual: Box<dyn Residual>,
    information: DMatrix<f64>,
    kernel: RobustKernel,
}

impl FactorEdge {
    /// Panics if the information matrix is not symmetric within 1e-12, not
    /// positive-definite, or does not match the residual dimension.
    pub fn new(residual: Box<dyn Residual>, information: DMatrix<f64>, kernel: RobustKernel) -> Self {
        let d = residual.dim();
        assert_eq!(information.nrows(), d, "information rows != residual dim");
        assert_eq!(information.ncols(), d, "information cols != residual dim");
        let asym = (&information - information.transpose()).abs().max();
        assert!(asym <= 1e-12, "information matrix asymmetric by {asym}");
        assert!(
            information.clone().cholesky().is_some(),
            "information matrix not positive-definite"
        );
        Self {
            residual,
            information,
            kernel,
        }
    }

    /// Scalar residual convenience: information `1/σ²`.
    pub fn new_scalar(residual: Box<dyn Residual>, sigma: f64, kernel: RobustKernel) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        Self::new(
            residual,
            DMatrix::from_element(1, 1, 1.0 / (sigma * sigma)),
            kernel,
        )
    }

    pub fn information(&self) -> &DMatrix<f64> {
        &self.information
    }

    pub fn residual_fn(&self) -> &dyn Residual {
        self.residual.as_ref()
    }

    pub fn kernel(&self) -> RobustKernel {
        self.kernel
    }
}

pub(crate) struct VariableNode {
    value: Value,
    fixed: bool,
    prior_mean: Value,
    prior_information: DMatrix<f64>,
}

/// Why [`Graph::optimize`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvergenceReason {
    /// Gradient norm fell below the tolerance.
    Gradient,
    /// Accepted step length fell below the tolerance (includes stalls at the
    /// damping ceiling).
    Step,
    /// Iteration budget exhausted.
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub reason: ConvergenceReason,
    /// Whether the marginal prior information of the optimized variables has
    /// been refreshed since this solve (set by the caller after
    /// [`Graph::update_marginal_information`]).
    pub marginals_updated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub initial_damping: f64,
    /// Free tangent dimension at or above which the normal equations are
    /// assembled and solved sparsely.
    pub sparse_threshold: usize,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            initial_damping: 1e-4,
            sparse_threshold: 200,
        }
    }
}

pub(crate) const DAMPING_FLOOR: f64 = 1e-12;
pub(crate) const DAMPING_CEILING: f64 = 1e8;
pub(crate) const DAMPING_STEP: f64 = 10.0;

/// Factor-graph container. Single-writer: mutation and optimization require
/// `&mut self`; the graph itself is `Send`.
#[derive(Default)]
pub struct Graph {
    variables: Vec<VariableNode>,
    factors: Vec<FactorEdge>,
    optimized_once: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a variable with its initial value.
    pub fn add_variable(&mut self, value: Value, fixed: bool) -> Result<VariableKey, GraphError> {
        if let Value::Scale(s) = value {
            if !(s > 0.0) {
                return Err(GraphError::InvalidInitialValue("scale must be positive"));
            }
        }
        let dof = value.dof();
        self.variables.push(VariableNode {
            prior_mean: value.clone(),
            value,
            fixed,
            prior_information: DMatrix::zeros(dof, dof),
        });
        Ok(VariableKey(self.variables.len() - 1))
    }

    /// Insert a factor. Panics on a variable key that does not exist (a
    /// programming error, unlike data-dependent failures which are `Err`s).
    pub fn add_factor(&mut self, edge: FactorEdge) -> FactorKey {
        for v in edge.residual.variables() {
            assert!(v.0 < self.variables.len(), "factor references unknown variable");
        }
        self.factors.push(edge);
        FactorKey(self.factors.len() - 1)
    }

    /// Swap an existing factor for a new edge (same slot, same key). Used
    /// when a measurement must be rewritten in place, e.g. rescaling
    /// relative-pose measurements during scale propagation.
    pub(crate) fn replace_factor(&mut self, key: FactorKey, edge: FactorEdge) {
        for v in edge.residual.variables() {
            assert!(v.0 < self.variables.len(), "factor references unknown variable");
        }
        self.factors[key.0] = edge;
    }

    pub fn variable_count(&self) -> usize {
        self.variables.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn value(&self, key: VariableKey) -> &Value {
        &self.variables[key.0].value
    }

    /// Overwrite a variable's current estimate with one of the same kind.
    pub fn set_value(&mut self, key: VariableKey, value: Value) {
        let node = &mut self.variables[key.0];
        assert!(node.value.same_kind(&value), "variable kind mismatch");
        if let Value::Scale(s) = value {
            assert!(s > 0.0, "scale must stay positive");
        }
        node.value = value;
    }

    pub fn is_fixed(&self, key: VariableKey) -> bool {
        self.variables[key.0].fixed
    }

    pub fn set_fixed(&mut self, key: VariableKey, fixed: bool) {
        self.variables[key.0].fixed = fixed;
    }

    pub fn prior_information(&self, key: VariableKey) -> &DMatrix<f64> {
        &self.variables[key.0].prior_information
    }

    /// Overwrite a variable's prior anchor (mean = current value).
    pub fn set_prior_information(&mut self, key: VariableKey, information: DMatrix<f64>) {
        let node = &mut self.variables[key.0];
        let dof = node.value.dof();
        assert_eq!(information.nrows(), dof);
        assert_eq!(information.ncols(), dof);
        node.prior_mean = node.value.clone();
        node.prior_information = information;
    }

    /// Minimize the robustified cost over all free variables.
    pub fn optimize(&mut self, settings: &OptimizeSettings) -> Result<OptimizeReport, GraphError> {
        solver::optimize(self, settings)
    }

    /// Optimize with exactly `free` left free; every other variable is
    /// temporarily fixed and restored afterwards.
    pub fn optimize_subset(
        &mut self,
        free: &[VariableKey],
        settings: &OptimizeSettings,
    ) -> Result<OptimizeReport, GraphError> {
        let saved: Vec<bool> = self.variables.iter().map(|v| v.fixed).collect();
        for node in &mut self.variables {
            node.fixed = true;
        }
        for key in free {
            self.variables[key.0].fixed = false;
        }
        let result = solver::optimize(self, settings);
        for (node, was_fixed) in self.variables.iter_mut().zip(saved) {
            node.fixed = was_fixed;
        }
        result
    }

    /// Replace the prior information of each listed variable with the
    /// Gauss-Newton Hessian diagonal block accumulated from every factor
    /// touching it at the current estimate, and re-anchor the prior mean at
    /// the current value. Variables no factor touches are left unchanged.
    /// Idempotent at a fixed estimate.
    pub fn update_marginal_information(
        &mut self,
        keys: &[VariableKey],
    ) -> Result<(), GraphError> {
        if !self.optimized_once {
            return Err(GraphError::NeverOptimized);
        }
        let mut buffer: Vec<Value> = Vec::new();
        for &key in keys {
            let dof = self.variables[key.0].value.dof();
            let mut info = DMatrix::zeros(dof, dof);
            let mut touched = false;
            for edge in &self.factors {
                let vars = edge.residual.variables();
                let Some(slot) = vars.iter().position(|&v| v == key) else {
                    continue;
                };
                buffer.clear();
                buffer.extend(vars.iter().map(|&v| self.variables[v.0].value.clone()));
                let (e, jacobians) = edge.residual.residual_and_jacobians(&buffer)?;
                let sq = (e.transpose() * &edge.information * &e)[(0, 0)];
                let w = edge.kernel.weight(sq);
                let j = &jacobians[slot];
                info += w * j.transpose() * &edge.information * j;
                touched = true;
            }
            if touched {
                let node = &mut self.variables[key.0];
                node.prior_information = info;
                node.prior_mean = node.value.clone();
            }
        }
        Ok(())
    }

    pub(crate) fn mark_optimized(&mut self) {
        self.optimized_once = true;
    }

    pub(crate) fn nodes(&self) -> &[VariableNode] {
        &self.variables
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut [VariableNode] {
        &mut self.variables
    }

    pub(crate) fn edges(&self) -> &[FactorEdge] {
        &self.factors
    }

    /// Total robustified cost (factor terms plus free-variable priors) at the
    /// current estimate.
    pub fn current_cost(&self) -> Result<f64, GraphError> {
        let values: Vec<Value> = self.variables.iter().map(|n| n.value.clone()).collect();
        solver::total_cost(self, &values)
    }
}

impl VariableNode {
    pub(crate) fn value(&self) -> &Value {
        &self.value
    }

    pub(crate) fn set_value(&mut self, value: Value) {
        self.value = value;
    }

    pub(crate) fn fixed(&self) -> bool {
        self.fixed
    }

    pub(crate) fn prior_terms(&self) -> Option<(&Value, &DMatrix<f64>)> {
        if self.prior_information.amax() == 0.0 {
            None
        } else {
            Some((&self.prior_mean, &self.prior_information))
        }
    }
}

/// Compare a residual's analytic Jacobians against central finite
/// differences taken on each variable's manifold, returning the maximum
/// absolute deviation over all blocks. `epsilon` must lie in (1e-10, 1e-3).
pub fn numeric_jacobian_check(
    residual: &dyn Residual,
    values: &[Value],
    epsilon: f64,
) -> Result<f64, FactorError> {
    assert!(
        epsilon > 1e-10 && epsilon < 1e-3,
        "epsilon outside sensible finite-difference range"
    );
    let (_, jacobians) = residual.residual_and_jacobians(values)?;
    let mut worst: f64 = 0.0;
    let mut perturbed = values.to_vec();
    for (slot, value) in values.iter().enumerate() {
        let dof = value.dof();
        let mut delta = vec![0.0; dof];
        for k in 0..dof {
            delta[k] = epsilon;
            perturbed[slot] = value.retract(&delta);
            let plus = residual.residual(&perturbed)?;
            delta[k] = -epsilon;
            perturbed[slot] = value.retract(&delta);
            let minus = residual.residual(&perturbed)?;
            delta[k] = 0.0;
            perturbed[slot] = value.clone();
            let fd = (plus - minus) / (2.0 * epsilon);
            for row in 0..residual.dim() {
                worst = worst.max((jacobians[slot][(row, k)] - fd[row]).abs());
            }
        }
    }
    Ok(worst)
}
