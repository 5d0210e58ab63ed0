//! Closed-form trajectory alignment (Horn/Umeyama) on timestamp-associated
//! pose pairs. Only the translation components enter the fit; rotations ride
//! along through the recovered transform.

use super::{RigidTransform, SimilarityTransform, TimedPose};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Default nearest-neighbour association window between two time series, in
/// seconds. Half a typical camera frame interval: generous enough to pair
/// streams sampled on different clocks, tight enough to never skip a frame.
pub const DEFAULT_ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum AlignmentError {
    /// Fewer than `required` timestamp-associated pairs were found.
    #[error("only {matched} associated pose pairs, need at least {required}")]
    InsufficientOverlap { matched: usize, required: usize },
    /// The centered point clouds are collinear or worse; the rotation is not
    /// uniquely determined.
    #[error("associated points are degenerate (collinear or rank-deficient)")]
    DegenerateGeometry,
    /// All points of one trajectory coincide, so no scale can be estimated.
    #[error("trajectory has zero spatial variance")]
    ZeroVariance,
}

/// Pair indices `(i, j)` such that `a[i]` and `b[j]` are nearest neighbours
/// in time within `max_offset` seconds. Both series must be sorted by time.
pub fn associate_by_time(
    a: &[TimedPose],
    b: &[TimedPose],
    max_offset: f64,
) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j0 = 0usize;
    for (i, pa) in a.iter().enumerate() {
        while j0 + 1 < b.len() && b[j0 + 1].time <= pa.time {
            j0 += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        for j in [j0, j0 + 1, j0 + 2] {
            if let Some(pb) = b.get(j) {
                let dt = (pb.time - pa.time).abs();
                if dt <= max_offset && best.map_or(true, |(_, d)| dt < d) {
                    best = Some((j, dt));
                }
            }
        }
        if let Some((j, _)) = best {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Least-squares `target ≈ s·R·source + t`. Returns `(s, rigid)`.
fn umeyama_fit(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(f64, RigidTransform), AlignmentError> {
    let n = source.len() as f64;
    let src_mean = source.iter().sum::<Vector3<f64>>() / n;
    let tgt_mean = target.iter().sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::zeros();
    let mut src_var = 0.0;
    let mut tgt_var = 0.0;
    for (s, t) in source.iter().zip(target.iter()) {
        let ds = s - src_mean;
        let dt = t - tgt_mean;
        cross += dt * ds.transpose();
        src_var += ds.norm_squared();
        tgt_var += dt.norm_squared();
    }
    cross /= n;
    src_var /= n;
    tgt_var /= n;

    if src_var < 1e-24 || tgt_var < 1e-24 {
        return Err(AlignmentError::ZeroVariance);
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd with u requested");
    let v_t = svd.v_t.expect("svd with v_t requested");
    let sv = svd.singular_values;
    // A unique rotation needs the two largest singular values to be
    // meaningfully nonzero; collinear clouds fail here.
    if sv[1] <= sv[0] * 1e-9 || sv[0] <= 0.0 {
        return Err(AlignmentError::DegenerateGeometry);
    }

    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[2] = -1.0;
    }
    let rot_mat = u * Matrix3::from_diagonal(&d) * v_t;
    let rotation = UnitQuaternion::from_matrix(&rot_mat);

    let scale = if with_scale {
        (sv[0] * d[0] + sv[1] * d[1] + sv[2] * d[2]) / src_var
    } else {
        1.0
    };
    if with_scale && scale <= 0.0 {
        return Err(AlignmentError::DegenerateGeometry);
    }
    let translation = tgt_mean - scale * (rotation * src_mean);
    Ok((scale, RigidTransform::new(rotation, translation)))
}

fn associated_points(
    estimate: &[TimedPose],
    reference: &[TimedPose],
    max_offset: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), AlignmentError> {
    let pairs = associate_by_time(estimate, reference, max_offset);
    if pairs.len() < 3 {
        return Err(AlignmentError::InsufficientOverlap {
            matched: pairs.len(),
            required: 3,
        });
    }
    let est: Vec<_> = pairs
        .iter()
        .map(|&(i, _)| estimate[i].pose.translation())
        .collect();
    let refp: Vec<_> = pairs
        .iter()
        .map(|&(_, j)| reference[j].pose.translation())
        .collect();
    Ok((est, refp))
}

/// Rigid transform `T` that best maps the reference trajectory onto the
/// estimate: `estimate ≈ T(reference)` in the least-squares sense.
pub fn align_se3(
    estimate: &[TimedPose],
    reference: &[TimedPose],
    max_offset: f64,
) -> Result<RigidTransform, AlignmentError> {
    let (est, refp) = associated_points(estimate, reference, max_offset)?;
    umeyama_fit(&refp, &est, false).map(|(_, t)| t)
}

/// Similarity transform `S` with `estimate ≈ S(reference)`; its scale is the
/// ratio estimate-size / reference-size (an estimate twice as large as the
/// reference yields scale 2).
pub fn align_sim3(
    estimate: &[TimedPose],
    reference: &[TimedPose],
    max_offset: f64,
) -> Result<SimilarityTransform, AlignmentError> {
    let (est, refp) = associated_points(estimate, reference, max_offset)?;
    umeyama_fit(&refp, &est, true).map(|(s, t)| SimilarityTransform::new(s, t))
}
