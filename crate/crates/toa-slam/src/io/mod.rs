//! File formats: TUM trajectories, range-measurement CSV, scenario
//! configuration TOML, GDOP series CSV, and the run manifest that makes every
//! experiment reproducible from disk.
//!
//! All writers format numbers with fixed precision so repeated runs produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::eval::GdopProfile;
use crate::geometry::{RigidTransform, TimedPose};
use crate::simulate::{ScenarioConfig, ToaMeasurement};

/// Decimal places used by every writer; keeps sub-nanometer precision while
/// staying deterministic.
const PRECISION: usize = 9;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    /// A text file failed to parse; `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// A configuration file failed to deserialize or validate. The message
    /// carries the deserializer's own line/column diagnostics.
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// TUM trajectories

/// Serialize poses in TUM format: `timestamp tx ty tz qx qy qz qw`, one line
/// per pose, `#` comments allowed.
pub fn format_tum(trajectory: &[TimedPose]) -> String {
    let mut out = String::with_capacity(trajectory.len() * 96);
    out.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for tp in trajectory {
        let t = tp.pose.translation();
        let q = tp.pose.rotation();
        let _ = writeln!(
            out,
            "{time:.p$} {tx:.p$} {ty:.p$} {tz:.p$} {qx:.p$} {qy:.p$} {qz:.p$} {qw:.p$}",
            time = tp.time,
            tx = t.x,
            ty = t.y,
            tz = t.z,
            qx = q.i,
            qy = q.j,
            qz = q.k,
            qw = q.w,
            p = PRECISION,
        );
    }
    out
}

pub fn write_tum(path: &Path, trajectory: &[TimedPose]) -> Result<(), IoError> {
    std::fs::write(path, format_tum(trajectory)).map_err(file_err(path))
}

pub fn read_tum(path: &Path) -> Result<Vec<TimedPose>, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let mut values = [0.0f64; 8];
        for (slot, field) in values.iter_mut().zip(&fields) {
            *slot = field
                .parse()
                .map_err(|e| parse_err(path, line_no, format!("bad number {field:?}: {e}")))?;
        }
        let [time, tx, ty, tz, qx, qy, qz, qw] = values;
        let rotation =
            UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
        out.push(TimedPose::new(
            time,
            RigidTransform::new(rotation, Vector3::new(tx, ty, tz)),
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// range measurements

/// Serialize measurements as CSV with the fixed header
/// `timestamp,station_id,range_m`.
pub fn format_toa_csv(measurements: &[ToaMeasurement]) -> String {
    let mut out = String::with_capacity(measurements.len() * 40 + 32);
    out.push_str("timestamp,station_id,range_m\n");
    for m in measurements {
        let _ = writeln!(
            out,
            "{time:.p$},{id},{range:.p$}",
            time = m.time,
            id = m.station_id,
            range = m.range_m,
            p = PRECISION,
        );
    }
    out
}

pub fn write_toa_csv(path: &Path, measurements: &[ToaMeasurement]) -> Result<(), IoError> {
    std::fs::write(path, format_toa_csv(measurements)).map_err(file_err(path))
}

pub fn read_toa_csv(path: &Path) -> Result<Vec<ToaMeasurement>, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    if header.trim() != "timestamp,station_id,range_m" {
        return Err(parse_err(
            path,
            1,
            format!("expected header 'timestamp,station_id,range_m', found {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for (index, line) in lines {
        let line_no = index + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 columns, found {}", fields.len()),
            ));
        }
        let time: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, line_no, format!("bad timestamp: {e}")))?;
        let station_id: u32 = fields[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, line_no, format!("bad station id: {e}")))?;
        let range_m: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|e| parse_err(path, line_no, format!("bad range: {e}")))?;
        out.push(ToaMeasurement {
            time,
            station_id,
            range_m,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// scenario configuration

/// Load and validate a scenario description (TOML with a fixed key schema;
/// unknown keys are hard errors).
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    let scenario: ScenarioConfig = toml::from_str(&text).map_err(|e| IoError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    scenario.validate().map_err(|e| IoError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(scenario)
}

pub fn save_scenario(path: &Path, scenario: &ScenarioConfig) -> Result<(), IoError> {
    let text = toml::to_string_pretty(scenario).map_err(|e| IoError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(file_err(path))
}

// ---------------------------------------------------------------------------
// GDOP series

/// Per-sample GDOP series plus aggregates, as CSV for external plotting.
pub fn format_gdop_csv(profile: &GdopProfile) -> String {
    let mut out = String::from("timestamp,gdop\n");
    for (time, value) in &profile.samples {
        let _ = writeln!(out, "{time:.p$},{value:.p$}", p = PRECISION);
    }
    let _ = writeln!(out, "# mean,{:.p$}", profile.mean, p = PRECISION);
    let _ = writeln!(out, "# max,{:.p$}", profile.max, p = PRECISION);
    let _ = writeln!(out, "# singular_samples,{}", profile.singular_count);
    out
}

pub fn write_gdop_csv(path: &Path, profile: &GdopProfile) -> Result<(), IoError> {
    std::fs::write(path, format_gdop_csv(profile)).map_err(file_err(path))
}

// ---------------------------------------------------------------------------
// run manifest

/// Paths produced by a simulation or estimation run. Everything needed to
/// reproduce or evaluate the run hangs off this record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManifestArtifacts {
    pub ground_truth: Option<PathBuf>,
    pub odometry: Option<PathBuf>,
    pub toa: Option<PathBuf>,
    pub estimate_local: Option<PathBuf>,
    pub estimate_global: Option<PathBuf>,
    pub estimate_summary: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
}

impl ManifestArtifacts {
    /// Every artifact path the manifest references, in a fixed order.
    pub fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        [
            &self.ground_truth,
            &self.odometry,
            &self.toa,
            &self.estimate_local,
            &self.estimate_global,
            &self.estimate_summary,
            &self.report_json,
            &self.report_csv,
        ]
        .into_iter()
        .flatten()
    }
}

/// Record of one run: which scenario, which seed, where the artifacts live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    /// The resolved scenario configuration the run used (a copy written next
    /// to the artifacts, so the manifest is self-contained).
    pub scenario_config: PathBuf,
    /// Seed actually used (after any command-line override).
    pub seed: u64,
    pub out_dir: PathBuf,
    pub artifacts: ManifestArtifacts,
}

impl RunManifest {
    /// Check the manifest's promise: every referenced file exists.
    pub fn validate(&self) -> Result<(), IoError> {
        for path in std::iter::once(&self.scenario_config).chain(self.artifacts.paths()) {
            if !path.exists() {
                return Err(IoError::File {
                    path: path.clone(),
                    source: std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "referenced by manifest but missing",
                    ),
                });
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_manifest(path: &Path, manifest: &RunManifest) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(file_err(path))
}

#[cfg(test)]
mod tests;
