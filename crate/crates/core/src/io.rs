//! Text formats: IMU CSV, feature-track CSV, TUM trajectories and the
//! per-step timing CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imu_preint::ImuSample;
use crate::lie::{Pose3, Rot3};
use crate::visual::FeatureObservation;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> FormatError + '_ {
    move |source| FormatError::Csv { path: path.display().to_string(), source }
}

#[derive(Serialize, Deserialize)]
struct ImuRow {
    stamp: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Serialize, Deserialize)]
struct TrackRow {
    track_id: u64,
    stamp: f64,
    u: f64,
    v: f64,
}

/// A stamped pose as stored in TUM files.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub stamp: f64,
    pub pose: Pose3,
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for s in samples {
        w.serialize(ImuRow {
            stamp: s.stamp,
            gx: s.gyro.x,
            gy: s.gyro.y,
            gz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, FormatError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ImuRow = row.map_err(csv_err(path))?;
        out.push(ImuSample::new(row.stamp, Vector3::new(row.gx, row.gy, row.gz), Vector3::new(row.ax, row.ay, row.az)));
    }
    Ok(out)
}

pub fn write_tracks_csv(path: &Path, obs: &[FeatureObservation]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for o in obs {
        w.serialize(TrackRow { track_id: o.track_id, stamp: o.stamp, u: o.pixel.x, v: o.pixel.y })
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_tracks_csv(path: &Path) -> Result<Vec<FeatureObservation>, FormatError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: TrackRow = row.map_err(csv_err(path))?;
        out.push(FeatureObservation { track_id: row.track_id, stamp: row.stamp, pixel: Vector2::new(row.u, row.v) });
    }
    Ok(out)
}

/// Writes `stamp tx ty tz qx qy qz qw` lines.
pub fn write_tum(path: &Path, poses: &[StampedPose]) -> Result<(), FormatError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in poses {
        let t = p.pose.translation;
        let q = p.pose.rotation.to_quaternion();
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.stamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_tum(path: &Path) -> Result<Vec<StampedPose>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| FormatError::Parse { path: path.display().to_string(), line: i + 1, msg };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", vals.len())));
        }
        let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.5) {
            return Err(parse_err("degenerate quaternion".into()));
        }
        let rot = Rot3::from_quaternion(&UnitQuaternion::from_quaternion(q));
        out.push(StampedPose { stamp: vals[0], pose: Pose3::new(rot, Vector3::new(vals[1], vals[2], vals[3])) });
    }
    Ok(out)
}

/// One row of the per-step timing log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stamp: f64,
    pub factors: usize,
    pub solve_ms: f64,
    pub marg_ms: f64,
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_timing_csv(path: &Path) -> Result<Vec<TimingRow>, FormatError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err(path))
}
