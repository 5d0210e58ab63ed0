//! SE3/Sim3 arithmetic and trajectory alignment.
//!
//! Rigid transforms are stored as a unit quaternion plus a translation
//! vector. Tangent vectors ([`Twist`]) use the layout `[rotation; translation]`
//! and the right-perturbation convention `T ⊕ δ = T · exp(δ)` throughout the
//! crate. Translation components of a twist are the `V(ω)⁻¹·t` coordinates of
//! the exponential chart, not the raw translation.

mod align;
mod jacobians;

pub use align::{
    align_se3, align_sim3, associate_by_time, AlignmentError, DEFAULT_ASSOCIATION_WINDOW,
};
pub use jacobians::{
    se3_adjoint, se3_left_jacobian, se3_right_jacobian_inv, so3_left_jacobian,
    so3_left_jacobian_inv,
};

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};

/// Series switch for the trigonometric coefficients of `V(ω)` and its
/// relatives. Below this angle the closed forms lose digits to cancellation
/// while the truncated series is already exact to machine precision.
pub(crate) const SMALL_ANGLE: f64 = 1e-4;

/// An SE3 element: rotation followed by translation, `T·p = R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Pure translation.
    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation,
        }
    }

    /// Rotation from a scaled axis (angle = vector norm), zero translation.
    pub fn from_scaled_axis(axis_angle: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_scaled_axis(axis_angle),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Group composition: `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize((self.rotation * other.rotation).into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rotation.inverse();
        Self {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Exponential map from a twist.
    pub fn exp(xi: &Twist) -> Self {
        let rotation = UnitQuaternion::from_scaled_axis(xi.rot);
        let translation = so3_left_jacobian(&xi.rot) * xi.trans;
        Self {
            rotation,
            translation,
        }
    }

    /// Logarithmic map; inverse of [`RigidTransform::exp`] for rotation
    /// angles below π.
    pub fn log(&self) -> Twist {
        let rot = self.rotation.scaled_axis();
        let trans = so3_left_jacobian_inv(&rot) * self.translation;
        Twist { rot, trans }
    }

    /// Right-perturbation retraction: `T · exp(δ)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        self.compose(&Self::exp(&Twist::from_vector(delta)))
    }

    /// Geodesic rotation distance to another transform, in radians.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn translation_distance_to(&self, other: &Self) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// An element of Sim(3): a rigid transform with a uniform positive scale,
/// `S·p = s·(R·p) + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    scale: f64,
    rigid: RigidTransform,
}

impl SimilarityTransform {
    /// Panics if `scale` is not strictly positive.
    pub fn new(scale: f64, rigid: RigidTransform) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        Self { scale, rigid }
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rigid: RigidTransform::identity(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rigid(&self) -> &RigidTransform {
        &self.rigid
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rigid.rotation() * p) + self.rigid.translation()
    }

    pub fn inverse(&self) -> Self {
        let inv_rot = self.rigid.rotation().inverse();
        let inv_scale = 1.0 / self.scale;
        Self {
            scale: inv_scale,
            rigid: RigidTransform::new(inv_rot, -inv_scale * (inv_rot * self.rigid.translation())),
        }
    }
}

/// Tangent-space element of SE3: `[rotation (rad); translation (m)]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist {
    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rot: Vector3::new(v[0], v[1], v[2]),
            trans: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rot[0],
            self.rot[1],
            self.rot[2],
            self.trans[0],
            self.trans[1],
            self.trans[2],
        )
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }
}

/// A pose with its timestamp in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub time: f64,
    pub pose: RigidTransform,
}

impl TimedPose {
    pub fn new(time: f64, pose: RigidTransform) -> Self {
        Self { time, pose }
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}
