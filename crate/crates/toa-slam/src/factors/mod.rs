//! Concrete residuals: the time-of-arrival range factor and the
//! relative-pose and prior factors the graph topologies require.
//!
//! The ToA residual compares the measured range (corrected by the station's
//! clock bias τ) against the distance between the station and the camera
//! position lifted into the global frame:
//!
//! ```text
//! e = ‖s·t_gc − L_G‖ − (d_meas − τ),   T_gc = T_go ∘ T_oc
//! ```
//!
//! with `t_gc` the translation of `T_gc`, `s` the metric scale of the local
//! map and `L_G` the station position in the global frame. The factor is a
//! function of the camera *position* only — rotating `T_oc` about its own
//! origin leaves the residual unchanged — and the monocular gauge
//! `t_oc → t_oc/k, t_go → t_go/k, s → s·k` is invisible to it, which is
//! exactly the degree of freedom the scale variable absorbs. Note the scale
//! multiplies the *composed* translation, so the transform's translation is
//! expressed in the local map's (pre-scale) units.

use crate::geometry::{se3_adjoint, se3_right_jacobian_inv, skew, RigidTransform, Twist};
use crate::graph::{FactorError, Residual, Value, VariableKey};
use nalgebra::{DMatrix, DVector, RowVector3, Vector3};

/// Range below which the camera is considered to sit on the station and the
/// residual direction is undefined.
const DEGENERATE_RANGE: f64 = 1e-9;

/// ToA range residual in meters (positive when the estimated geometry is
/// farther than the bias-corrected measurement).
pub fn toa_residual(
    t_oc: &RigidTransform,
    t_go: &RigidTransform,
    scale: f64,
    bias: f64,
    station: &Vector3<f64>,
    measured: f64,
) -> f64 {
    let t_gc = t_go.compose(t_oc).translation();
    (scale * t_gc - station).norm() - (measured - bias)
}

/// Analytic partials of [`toa_residual`] w.r.t. each variable's tangent.
#[derive(Debug, PartialEq)]
pub struct ToaJacobians {
    /// w.r.t. right perturbation of `T_oc`, layout `[rotation; translation]`.
    pub pose: nalgebra::RowVector6<f64>,
    /// w.r.t. right perturbation of `T_go`.
    pub transform: nalgebra::RowVector6<f64>,
    /// w.r.t. `log s`.
    pub log_scale: f64,
    /// w.r.t. the bias, exactly 1.
    pub bias: f64,
    /// w.r.t. the station position; `−u` with `u` the unit vector from the
    /// station toward the scaled camera position.
    pub station: RowVector3<f64>,
}

/// Errors with [`FactorError::DegenerateRange`] when the scaled camera
/// position coincides with the station.
pub fn toa_jacobians(
    t_oc: &RigidTransform,
    t_go: &RigidTransform,
    scale: f64,
    station: &Vector3<f64>,
) -> Result<ToaJacobians, FactorError> {
    let r_go = t_go.rotation_matrix();
    let t_gc = t_go.compose(t_oc).translation();
    let diff = scale * t_gc - station;
    let norm = diff.norm();
    if norm < DEGENERATE_RANGE {
        return Err(FactorError::DegenerateRange);
    }
    let u = (diff / norm).transpose(); // row vector

    let r_gc = r_go * t_oc.rotation_matrix();
    let mut pose = nalgebra::RowVector6::zeros();
    pose.fixed_view_mut::<1, 3>(0, 3)
        .copy_from(&(scale * u * r_gc));

    let mut transform = nalgebra::RowVector6::zeros();
    transform
        .fixed_view_mut::<1, 3>(0, 0)
        .copy_from(&(-scale * u * r_go * skew(&t_oc.translation())));
    transform
        .fixed_view_mut::<1, 3>(0, 3)
        .copy_from(&(scale * u * r_go));

    Ok(ToaJacobians {
        pose,
        transform,
        log_scale: scale * (u * t_gc)[0],
        bias: 1.0,
        station: -u,
    })
}

/// Relative-pose residual `log(ΔT_meas⁻¹ ∘ T_i⁻¹ ∘ T_j)`; zero iff the
/// measurement is consistent with the two poses.
pub fn relative_pose_residual(
    t_i: &RigidTransform,
    t_j: &RigidTransform,
    measured: &RigidTransform,
) -> Twist {
    measured
        .inverse()
        .compose(&t_i.inverse())
        .compose(t_j)
        .log()
}

/// Factor connecting one camera pose, the frame transform, a station clock
/// bias, the station position, and optionally the map scale (absent means
/// the scale is pinned at 1, as with stereo or depth input).
pub struct ToaFactor {
    vars: Vec<VariableKey>,
    has_scale: bool,
    measured: f64,
}

impl ToaFactor {
    /// Panics unless `measured > 0`.
    pub fn new(
        pose: VariableKey,
        transform: VariableKey,
        bias: VariableKey,
        station: VariableKey,
        scale: Option<VariableKey>,
        measured: f64,
    ) -> Self {
        assert!(measured > 0.0, "measured range must be positive");
        let mut vars = vec![pose, transform, bias, station];
        if let Some(s) = scale {
            vars.push(s);
        }
        Self {
            vars,
            has_scale: scale.is_some(),
            measured,
        }
    }

    pub fn measured(&self) -> f64 {
        self.measured
    }

    fn unpack<'a>(&self, values: &'a [Value]) -> (&'a RigidTransform, &'a RigidTransform, f64, &'a Vector3<f64>, f64) {
        let t_oc = values[0].as_pose();
        let t_go = values[1].as_pose();
        let bias = values[2].as_scalar();
        let station = values[3].as_point();
        let scale = if self.has_scale {
            values[4].as_scalar()
        } else {
            1.0
        };
        (t_oc, t_go, bias, station, scale)
    }
}

impl Residual for ToaFactor {
    fn dim(&self) -> usize {
        1
    }

    fn variables(&self) -> &[VariableKey] {
        &self.vars
    }

    fn residual(&self, values: &[Value]) -> Result<DVector<f64>, FactorError> {
        let (t_oc, t_go, bias, station, scale) = self.unpack(values);
        Ok(DVector::from_element(
            1,
            toa_residual(t_oc, t_go, scale, bias, station, self.measured),
        ))
    }

    fn residual_and_jacobians(
        &self,
        values: &[Value],
    ) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), FactorError> {
        let (t_oc, t_go, bias, station, scale) = self.unpack(values);
        let jac = toa_jacobians(t_oc, t_go, scale, station)?;
        let e = toa_residual(t_oc, t_go, scale, bias, station, self.measured);

        let mut jacobians = vec![
            DMatrix::from_iterator(1, 6, jac.pose.iter().copied()),
            DMatrix::from_iterator(1, 6, jac.transform.iter().copied()),
            DMatrix::from_element(1, 1, jac.bias),
            DMatrix::from_iterator(1, 3, jac.station.iter().copied()),
        ];
        if self.has_scale {
            jacobians.push(DMatrix::from_element(1, 1, jac.log_scale));
        }
        Ok((DVector::from_element(1, e), jacobians))
    }
}

/// Six-dof constraint between two poses: odometry edges between consecutive
/// keyframes and loop-closure edges between revisited ones share this form.
pub struct RelativePoseFactor {
    vars: [VariableKey; 2],
    measured: RigidTransform,
}

impl RelativePoseFactor {
    pub fn new(from: VariableKey, to: VariableKey, measured: RigidTransform) -> Self {
        Self {
            vars: [from, to],
            measured,
        }
    }

    pub fn measured(&self) -> &RigidTransform {
        &self.measured
    }

    /// Replace the measurement (used when re-expressing odometry in a
    /// rescaled local frame).
    pub fn set_measured(&mut self, measured: RigidTransform) {
        self.measured = measured;
    }
}

impl Residual for RelativePoseFactor {
    fn dim(&self) -> usize {
        6
    }

    fn variables(&self) -> &[VariableKey] {
        &self.vars
    }

    fn residual(&self, values: &[Value]) -> Result<DVector<f64>, FactorError> {
        let r = relative_pose_residual(values[0].as_pose(), values[1].as_pose(), &self.measured);
        Ok(DVector::from_column_slice(r.as_vector().as_slice()))
    }

    fn residual_and_jacobians(
        &self,
        values: &[Value],
    ) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), FactorError> {
        let t_i = values[0].as_pose();
        let t_j = values[1].as_pose();
        let r = relative_pose_residual(t_i, t_j, &self.measured);
        let jr_inv = se3_right_jacobian_inv(&r);
        let adj = se3_adjoint(&t_j.inverse().compose(t_i));
        let j_j = jr_inv;
        let j_i = -jr_inv * adj;
        Ok((
            DVector::from_column_slice(r.as_vector().as_slice()),
            vec![
                DMatrix::from_iterator(6, 6, j_i.iter().copied()),
                DMatrix::from_iterator(6, 6, j_j.iter().copied()),
            ],
        ))
    }
}

/// Anchors a single variable of any kind at a fixed mean in its tangent
/// space.
pub struct PriorFactor {
    vars: [VariableKey; 1],
    mean: Value,
}

impl PriorFactor {
    pub fn new(var: VariableKey, mean: Value) -> Self {
        Self { vars: [var], mean }
    }
}

impl Residual for PriorFactor {
    fn dim(&self) -> usize {
        self.mean.dof()
    }

    fn variables(&self) -> &[VariableKey] {
        &self.vars
    }

    fn residual(&self, values: &[Value]) -> Result<DVector<f64>, FactorError> {
        Ok(values[0].local_difference(&self.mean))
    }

    fn residual_and_jacobians(
        &self,
        values: &[Value],
    ) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), FactorError> {
        Ok((
            values[0].local_difference(&self.mean),
            vec![values[0].local_difference_jacobian(&self.mean)],
        ))
    }
}
