//! Trajectory metrics and station-geometry analysis: absolute trajectory
//! error under three alignment conventions, scale error, improvement
//! percentages, and geometric dilution of precision (GDOP).

use crate::geometry::{
    align_se3, align_sim3, associate_by_time, AlignmentError, TimedPose,
    DEFAULT_ASSOCIATION_WINDOW,
};
use nalgebra::{Matrix4, RowVector4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("GDOP needs at least 4 stations, got {0}")]
    TooFewStations(usize),
    /// The direction matrix is rank-deficient: the receiver cannot be
    /// resolved in all four unknowns (three coordinates plus clock), e.g.
    /// coplanar stations with the receiver in the same plane.
    #[error("station geometry is singular at this receiver position")]
    SingularGeometry,
    #[error("station geometry is singular at every trajectory sample")]
    AllSingular,
}

/// Which transform family is removed before measuring trajectory error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// No post-alignment: errors are measured in the frame the estimate was
    /// delivered in (the global-accuracy convention).
    None,
    /// Best rigid transform removed first (the local-accuracy convention).
    Se3,
    /// Best similarity transform removed first (monocular convention; also
    /// recovers the estimate/reference scale ratio).
    Sim3,
}

/// Result of [`ate_rmse`]: the RMSE in meters and, for similarity
/// alignment, the recovered estimate/reference scale ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub rmse_m: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// Root-mean-square translation error between timestamp-associated pose
/// pairs after removing the requested transform family.
pub fn ate_rmse(
    estimate: &[TimedPose],
    reference: &[TimedPose],
    alignment: Alignment,
) -> Result<AteResult, EvalError> {
    let pairs = associate_by_time(estimate, reference, DEFAULT_ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(AlignmentError::InsufficientOverlap {
            matched: pairs.len(),
            required: 3,
        }
        .into());
    }
    let mut scale = None;
    let mut sum_sq = 0.0;
    match alignment {
        Alignment::None => {
            for &(i, j) in &pairs {
                sum_sq += (estimate[i].pose.translation() - reference[j].pose.translation())
                    .norm_squared();
            }
        }
        Alignment::Se3 => {
            let t = align_se3(estimate, reference, DEFAULT_ASSOCIATION_WINDOW)?;
            for &(i, j) in &pairs {
                let mapped = t.transform_point(&reference[j].pose.translation());
                sum_sq += (estimate[i].pose.translation() - mapped).norm_squared();
            }
        }
        Alignment::Sim3 => {
            let s = align_sim3(estimate, reference, DEFAULT_ASSOCIATION_WINDOW)?;
            scale = Some(s.scale());
            for &(i, j) in &pairs {
                let mapped = s.transform_point(&reference[j].pose.translation());
                sum_sq += (estimate[i].pose.translation() - mapped).norm_squared();
            }
        }
    }
    Ok(AteResult {
        rmse_m: (sum_sq / pairs.len() as f64).sqrt(),
        scale,
    })
}

/// Percentage deviation of a recovered scale from the true one:
/// `100·|recovered/true − 1|`.
pub fn scale_error_pct(recovered: f64, truth: f64) -> f64 {
    assert!(truth > 0.0, "true scale must be positive");
    100.0 * (recovered / truth - 1.0).abs()
}

/// Relative improvement of a variant over a baseline metric (lower is
/// better): `100·(baseline − variant)/baseline`, positive when the variant
/// wins.
pub fn improvement_pct(baseline: f64, variant: f64) -> f64 {
    assert!(baseline > 0.0, "baseline metric must be positive");
    100.0 * (baseline - variant) / baseline
}

/// Relative eigenvalue threshold below which the 4×4 normal matrix is
/// treated as rank-deficient.
const GDOP_SINGULAR_RATIO: f64 = 1e-10;

/// Geometric dilution of precision at one receiver position: each station
/// contributes a unit-direction row (with a trailing 1 for the clock
/// unknown) to `G`, and GDOP = √trace((GᵀG)⁻¹).
pub fn gdop(receiver: &Vector3<f64>, stations: &[Vector3<f64>]) -> Result<f64, EvalError> {
    if stations.len() < 4 {
        return Err(EvalError::TooFewStations(stations.len()));
    }
    let mut normal = Matrix4::zeros();
    for station in stations {
        let offset = station - receiver;
        let distance = offset.norm();
        if distance < 1e-9 {
            return Err(EvalError::SingularGeometry);
        }
        let u = offset / distance;
        let row = RowVector4::new(u.x, u.y, u.z, 1.0);
        normal += row.transpose() * row;
    }
    let eigen = normal.symmetric_eigenvalues();
    let max_eig = eigen.amax();
    if eigen.iter().any(|&l| l <= max_eig * GDOP_SINGULAR_RATIO) {
        return Err(EvalError::SingularGeometry);
    }
    Ok(eigen.iter().map(|l| 1.0 / l).sum::<f64>().sqrt())
}

/// GDOP aggregated along a trajectory. Samples where the geometry is
/// singular are excluded from the aggregates and counted instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdopProfile {
    pub mean: f64,
    pub max: f64,
    /// `(time, gdop)` for every non-singular sample.
    pub samples: Vec<(f64, f64)>,
    pub singular_count: usize,
}

/// Evaluate [`gdop`] at every trajectory sample and aggregate.
pub fn gdop_profile(
    trajectory: &[TimedPose],
    stations: &[Vector3<f64>],
) -> Result<GdopProfile, EvalError> {
    if stations.len() < 4 {
        return Err(EvalError::TooFewStations(stations.len()));
    }
    let mut samples = Vec::with_capacity(trajectory.len());
    let mut singular_count = 0usize;
    for tp in trajectory {
        match gdop(&tp.pose.translation(), stations) {
            Ok(v) => samples.push((tp.time, v)),
            Err(EvalError::SingularGeometry) => singular_count += 1,
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        return Err(EvalError::AllSingular);
    }
    let mean = samples.iter().map(|&(_, v)| v).sum::<f64>() / samples.len() as f64;
    let max = samples.iter().map(|&(_, v)| v).fold(f64::MIN, f64::max);
    Ok(GdopProfile {
        mean,
        max,
        samples,
        singular_count,
    })
}

/// Summary metrics for one estimation run, serialized into run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    /// Local accuracy: ATE after rigid alignment (m).
    pub local_ate_se3_m: f64,
    /// Local accuracy after similarity alignment (m); monocular runs only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_ate_sim3_m: Option<f64>,
    /// ATE of the raw local estimate without any alignment (m).
    pub unaligned_local_ate_m: f64,
    /// Global accuracy: ATE of the globally referenced estimate, no
    /// post-alignment (m).
    pub global_ate_m: f64,
    /// Recovered-scale deviation from truth (%); monocular runs only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_error_pct: Option<f64>,
    /// Global ATE divided by the mode-appropriate local ATE (Sim3-aligned
    /// for monocular runs, otherwise SE3-aligned). The global estimate is a
    /// transformed copy of the local one, so this can never drop below 1:
    /// the local figure already uses the best transform of that family.
    pub global_to_local_ratio: f64,
    /// Mean/max GDOP along the ground-truth trajectory, when ≥4 stations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_gdop: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_gdop: Option<f64>,
    /// Improvement of this run's local ATE over a named baseline (%).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improvement_over_baseline_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_name: Option<String>,
}

impl EvalReport {
    /// Check the internal consistency constraints every report must satisfy.
    pub fn validate(&self) -> Result<(), String> {
        let ates = [
            self.local_ate_se3_m,
            self.unaligned_local_ate_m,
            self.global_ate_m,
        ];
        if ates.iter().chain(self.local_ate_sim3_m.iter()).any(|a| *a < 0.0) {
            return Err("ATE values must be non-negative".into());
        }
        if self.global_to_local_ratio < 1.0 - 1e-9 {
            return Err(format!(
                "global-to-local ratio {} below 1: alignment can only reduce error",
                self.global_to_local_ratio
            ));
        }
        Ok(())
    }
}
