//! Trajectory alignment and relative trajectory error.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::StampedPose;
use crate::lie::{Pose3, Rot3};

/// Nearest-stamp association tolerance (s).
pub const ASSOCIATION_TOL: f64 = 0.005;
pub const DEFAULT_DELTAS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("only {0} associated pose pairs in the alignment horizon; need at least 3")]
    InsufficientOverlap(usize),
    #[error("segment length must be positive, got {0}")]
    InvalidDelta(f64),
}

/// Estimate and reference associated by stamp, with the estimate already
/// mapped through `alignment`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair {
    pub stamps: Vec<f64>,
    pub estimate: Vec<Pose3>,
    pub reference: Vec<Pose3>,
    pub alignment: Pose3,
}

/// Pairs `(estimate, reference)` whose stamps differ by at most `tol`,
/// nearest reference stamp per estimate. Both inputs sorted by stamp.
pub fn associate(est: &[StampedPose], reference: &[StampedPose], tol: f64) -> Vec<(StampedPose, StampedPose)> {
    let mut out = Vec::new();
    for e in est {
        let i = reference.partition_point(|r| r.stamp < e.stamp);
        let best = [i.checked_sub(1), (i < reference.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (reference[a].stamp - e.stamp).abs().total_cmp(&(reference[b].stamp - e.stamp).abs()));
        if let Some(j) = best {
            if (reference[j].stamp - e.stamp).abs() <= tol {
                out.push((*e, reference[j]));
            }
        }
    }
    out
}

/// Rigid transform `G` minimizing `sum |G p_est - p_ref|^2` over the pairs.
pub fn rigid_fit(est: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<Pose3, MetricsError> {
    let n = est.len().min(reference.len());
    if n < 3 {
        return Err(MetricsError::InsufficientOverlap(n));
    }
    let mu_e = est.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_r = reference.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for (e, r) in est.iter().zip(reference) {
        cov += (r - mu_r) * (e - mu_e).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot = Rot3::from_matrix(&(u * s * v_t));
    Ok(Pose3::new(rot, mu_r - rot.rotate(&mu_e)))
}

/// Alignment over the pairs whose stamps fall in the first `horizon`
/// seconds of the associated overlap.
pub fn align_first_seconds(est: &[StampedPose], reference: &[StampedPose], horizon: f64) -> Result<Pose3, MetricsError> {
    let pairs = associate(est, reference, ASSOCIATION_TOL);
    let Some(t0) = pairs.first().map(|(e, _)| e.stamp) else {
        return Err(MetricsError::InsufficientOverlap(0));
    };
    let (e, r): (Vec<_>, Vec<_>) = pairs
        .iter()
        .filter(|(e, _)| e.stamp <= t0 + horizon + 1e-9)
        .map(|(e, r)| (e.pose.translation, r.pose.translation))
        .unzip();
    rigid_fit(&e, &r)
}

pub fn align(est: &[StampedPose], reference: &[StampedPose], horizon: f64) -> Result<AlignedPair, MetricsError> {
    let alignment = align_first_seconds(est, reference, horizon)?;
    let pairs = associate(est, reference, ASSOCIATION_TOL);
    Ok(AlignedPair {
        stamps: pairs.iter().map(|(e, _)| e.stamp).collect(),
        estimate: pairs.iter().map(|(e, _)| alignment * e.pose).collect(),
        reference: pairs.iter().map(|(_, r)| r.pose).collect(),
        alignment,
    })
}

fn yaw(r: &Rot3) -> f64 {
    let m = r.matrix();
    m[(1, 0)].atan2(m[(0, 0)])
}

/// Relative-motion errors over all segments of length `delta`:
/// translation (m) and yaw (deg) per segment.
pub fn relative_errors(aligned: &AlignedPair, delta: f64) -> Result<Vec<(f64, f64)>, MetricsError> {
    if !(delta > 0.0) {
        return Err(MetricsError::InvalidDelta(delta));
    }
    let s = &aligned.stamps;
    let mut out = Vec::new();
    for i in 0..s.len() {
        let target = s[i] + delta;
        let j = s.partition_point(|t| *t < target);
        let best = [j.checked_sub(1), (j < s.len()).then_some(j)]
            .into_iter()
            .flatten()
            .filter(|&k| k > i)
            .min_by(|&a, &b| (s[a] - target).abs().total_cmp(&(s[b] - target).abs()));
        let Some(j) = best.filter(|&k| (s[k] - target).abs() <= ASSOCIATION_TOL) else { continue };
        let rel_est = aligned.estimate[i].inverse() * aligned.estimate[j];
        let rel_ref = aligned.reference[i].inverse() * aligned.reference[j];
        let err = rel_ref.inverse() * rel_est;
        out.push((err.translation.norm(), yaw(&err.rotation).abs().to_degrees()));
    }
    Ok(out)
}

fn rms(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// RMS translational RTE (m); `None` when no segment of length `delta` fits.
pub fn rms_rte(aligned: &AlignedPair, delta: f64) -> Result<Option<f64>, MetricsError> {
    Ok(rms(relative_errors(aligned, delta)?.into_iter().map(|e| e.0)))
}

/// RMS yaw RTE (deg).
pub fn rms_rte_yaw(aligned: &AlignedPair, delta: f64) -> Result<Option<f64>, MetricsError> {
    Ok(rms(relative_errors(aligned, delta)?.into_iter().map(|e| e.1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RteEntry {
    pub delta: f64,
    pub segments: usize,
    pub translation_rms_m: Option<f64>,
    pub yaw_rms_deg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub translation: [f64; 3],
    /// `[x, y, z, w]`
    pub quaternion: [f64; 4],
    pub horizon_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub note: String,
    pub estimate_poses: usize,
    pub reference_poses: usize,
    pub associated_pairs: usize,
    pub alignment: AlignmentRecord,
    pub rte: Vec<RteEntry>,
}

impl MetricsReport {
    pub fn headline(&self) -> Option<&RteEntry> {
        self.rte.iter().find(|e| e.delta == 1.0)
    }
}

pub fn evaluate(est: &[StampedPose], reference: &[StampedPose], horizon: f64, deltas: &[f64]) -> Result<MetricsReport, MetricsError> {
    let aligned = align(est, reference, horizon)?;
    let mut rte = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let errs = relative_errors(&aligned, delta)?;
        rte.push(RteEntry {
            delta,
            segments: errs.len(),
            translation_rms_m: rms(errs.iter().map(|e| e.0)),
            yaw_rms_deg: rms(errs.iter().map(|e| e.1)),
        });
    }
    let q = aligned.alignment.rotation.to_quaternion();
    let t = aligned.alignment.translation;
    Ok(MetricsReport {
        note: "SE(3) alignment on the first horizon seconds; yaw errors taken from aligned relative motions".into(),
        estimate_poses: est.len(),
        reference_poses: reference.len(),
        associated_pairs: aligned.stamps.len(),
        alignment: AlignmentRecord { translation: [t.x, t.y, t.z], quaternion: [q.i, q.j, q.k, q.w], horizon_s: horizon },
        rte,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, f: impl Fn(f64) -> Pose3) -> Vec<StampedPose> {
        (0..n).map(|i| i as f64 * 0.05).map(|t| StampedPose { stamp: t, pose: f(t) }).collect()
    }

    fn wiggle(t: f64) -> Pose3 {
        Pose3::new(Rot3::exp(&Vector3::new(0.1 * t.sin(), 0.2 * t.cos(), 0.3 * t)), Vector3::new(t, (2.0 * t).sin(), 0.1 * t * t))
    }

    #[test]
    fn identical_is_zero() {
        let a = line(200, wiggle);
        let al = align(&a, &a, 5.0).unwrap();
        assert!(al.alignment.log().norm() < 1e-9);
        assert!(rms_rte(&al, 1.0).unwrap().unwrap() < 1e-9);
    }

    #[test]
    fn too_few_pairs() {
        let a = line(2, wiggle);
        assert_eq!(align_first_seconds(&a, &a, 5.0), Err(MetricsError::InsufficientOverlap(2)));
    }

    #[test]
    fn constant_drift() {
        let d = 0.03;
        let reference = line(400, wiggle);
        let est: Vec<_> = reference
            .iter()
            .map(|s| StampedPose { stamp: s.stamp, pose: Pose3::new(s.pose.rotation, s.pose.translation + Vector3::x() * d * s.stamp) })
            .collect();
        let al = AlignedPair {
            stamps: reference.iter().map(|s| s.stamp).collect(),
            estimate: est.iter().map(|s| s.pose).collect(),
            reference: reference.iter().map(|s| s.pose).collect(),
            alignment: Pose3::identity(),
        };
        assert!((rms_rte(&al, 1.0).unwrap().unwrap() - d).abs() < 1e-9);
    }
}
