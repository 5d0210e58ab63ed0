//! Lie-group Jacobians for SE3 with the `[rotation; translation]` tangent
//! layout. The SE3 blocks follow the closed form with the coupling block `Q`
//! expressed through three trigonometric coefficients; each coefficient
//! switches to its Taylor series below [`SMALL_ANGLE`](super::SMALL_ANGLE)
//! where the closed form cancels catastrophically.

use super::{skew, RigidTransform, Twist, SMALL_ANGLE};
use nalgebra::{Matrix3, Matrix6};

/// Left Jacobian of SO3, `J_l(ω) = I + a·[ω]× + b·[ω]×²` with
/// `a = (1−cosθ)/θ²`, `b = (θ−sinθ)/θ³`.
pub fn so3_left_jacobian(w: &nalgebra::Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    let (a, b) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        (
            (1.0 - theta.cos()) / t2,
            (theta - theta.sin()) / (t2 * theta),
        )
    };
    Matrix3::identity() + a * wx + b * (wx * wx)
}

/// Inverse of the SO3 left Jacobian,
/// `J_l⁻¹(ω) = I − ½[ω]× + c·[ω]×²` with `c = (1 − θ·cot(θ/2)/2)/θ²`.
pub fn so3_left_jacobian_inv(w: &nalgebra::Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let wx = skew(w);
    let c = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Matrix3::identity() - 0.5 * wx + c * (wx * wx)
}

/// The translation–rotation coupling block of the SE3 left Jacobian.
fn se3_q_block(xi: &Twist) -> Matrix3<f64> {
    let w = xi.rot;
    let v = xi.trans;
    let theta = w.norm();
    let wx = skew(&w);
    let vx = skew(&v);

    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (
            1.0 / 6.0 - t2 / 120.0,
            1.0 / 24.0 - t2 / 720.0,
            1.0 / 120.0 - t2 / 2520.0,
        )
    } else {
        let t2 = theta * theta;
        let t3 = t2 * theta;
        let (s, c) = theta.sin_cos();
        let c1 = (theta - s) / t3;
        let c2 = (1.0 - 0.5 * t2 - c) / (t2 * t2);
        let c3 = 0.5 * (c2 - 3.0 * (theta - s - t3 / 6.0) / (t3 * t2));
        (c1, c2, c3)
    };

    let wvw = wx * vx * wx;
    0.5 * vx
        + c1 * (wx * vx + vx * wx + wvw)
        - c2 * (wx * wx * vx + vx * wx * wx - 3.0 * wvw)
        - c3 * (wvw * wx + wx * wvw)
}

/// Left Jacobian of SE3 in block form
/// `[[J_l(ω), 0], [Q(ξ), J_l(ω)]]` for the `[rotation; translation]` layout.
pub fn se3_left_jacobian(xi: &Twist) -> Matrix6<f64> {
    let jl = so3_left_jacobian(&xi.rot);
    let q = se3_q_block(xi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

/// Inverse right Jacobian of SE3: `J_r⁻¹(ξ) = J_l⁻¹(−ξ)` with
/// `J_l⁻¹ = [[J_l⁻¹, 0], [−J_l⁻¹·Q·J_l⁻¹, J_l⁻¹]]`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let neg = Twist::new(-xi.rot, -xi.trans);
    let jli = so3_left_jacobian_inv(&neg.rot);
    let q = se3_q_block(&neg);
    let coupling = -jli * q * jli;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jli);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jli);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&coupling);
    out
}

/// Adjoint of an SE3 element for the `[rotation; translation]` layout:
/// `Ad_T = [[R, 0], [[t]×·R, R]]`, satisfying `T·exp(ξ) = exp(Ad_T·ξ)·T`.
pub fn se3_adjoint(t: &RigidTransform) -> Matrix6<f64> {
    let r = t.rotation_matrix();
    let tx_r = skew(&t.translation()) * r;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&tx_r);
    out
}
