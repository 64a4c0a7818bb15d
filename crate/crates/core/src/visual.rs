//! Pinhole camera, interpolated projection residual, Huber loss and
//! multi-view triangulation.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{hat, Pose3, Rot3};

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Points closer than this to the camera plane are not projected.
pub const MIN_DEPTH: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VisualError {
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("point at depth {0} is behind the camera")]
    BehindCamera(f64),
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("parallax {0:.2} px below threshold")]
    Deferred(f64),
    #[error("triangulation rejected: {0}")]
    Rejected(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    /// Camera pose in the body frame.
    pub extrinsic: Pose3,
    pub width: f64,
    pub height: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64, extrinsic: Pose3) -> Result<Self, VisualError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(VisualError::InvalidCamera("focal lengths must be positive"));
        }
        if !(width > 0.0 && height > 0.0) {
            return Err(VisualError::InvalidCamera("image size must be positive"));
        }
        Ok(Self { intrinsics: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0), extrinsic, width, height })
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width && pixel.y < self.height
    }

    /// Pixel of a camera-frame point; depth is not checked.
    pub fn pixel(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx() * pc.x / pc.z + self.cx(), self.fy() * pc.y / pc.z + self.cy())
    }

    /// Unit-depth ray for a pixel.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx()) / self.fx(), (pixel.y - self.cy()) / self.fy(), 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureObservation {
    pub track_id: u64,
    pub stamp: f64,
    pub pixel: Vector2<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub position: Vector3<f64>,
}

/// World-to-camera transform for a body pose.
pub fn camera_from_world(pose: &Pose3, cam: &CameraModel) -> Pose3 {
    (*pose * cam.extrinsic).inverse()
}

/// Projects a world point through body pose `pose`; returns pixel and depth.
pub fn project(pose: &Pose3, cam: &CameraModel, landmark: &Landmark) -> Result<(Vector2<f64>, f64), VisualError> {
    let pc = camera_from_world(pose, cam).transform_point(&landmark.position);
    if pc.z <= MIN_DEPTH {
        return Err(VisualError::BehindCamera(pc.z));
    }
    Ok((cam.pixel(&pc), pc.z))
}

/// Pixel residual and its Jacobians with respect to the right-perturbed body
/// pose and the world landmark.
#[derive(Clone, Debug)]
pub struct ProjectionLinearization {
    pub residual: Vector2<f64>,
    pub jac_pose: Matrix2x6,
    pub jac_landmark: Matrix2x3<f64>,
    pub depth: f64,
}

pub fn projection_residual(
    pose: &Pose3,
    cam: &CameraModel,
    landmark: &Landmark,
    obs: &FeatureObservation,
) -> Result<ProjectionLinearization, VisualError> {
    let q = pose.inverse_transform_point(&landmark.position);
    let r_bc_t = cam.extrinsic.rotation.matrix().transpose();
    let pc = r_bc_t * (q - cam.extrinsic.translation);
    if pc.z <= MIN_DEPTH {
        return Err(VisualError::BehindCamera(pc.z));
    }
    let (fx, fy) = (cam.fx(), cam.fy());
    let iz = 1.0 / pc.z;
    let dpix = Matrix2x3::new(fx * iz, 0.0, -fx * pc.x * iz * iz, 0.0, fy * iz, -fy * pc.y * iz * iz);
    let mut dpc_dpose = SMatrix::<f64, 3, 6>::zeros();
    dpc_dpose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_bc_t));
    dpc_dpose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(r_bc_t * hat(&q)));
    let dpc_dl = r_bc_t * pose.rotation.matrix().transpose();
    Ok(ProjectionLinearization {
        residual: obs.pixel - cam.pixel(&pc),
        jac_pose: -(dpix * dpc_dpose),
        jac_landmark: -(dpix * dpc_dl),
        depth: pc.z,
    })
}

/// Huber loss on the normalized residual norm `s = |r| / sigma`: returns
/// `(s^2, 1)` inside `delta` and `(delta (2 s - delta), delta / s)` beyond.
pub fn huber(residual: &Vector2<f64>, sigma: f64, delta: f64) -> (f64, f64) {
    let s = residual.norm() / sigma;
    if s <= delta {
        (s * s, 1.0)
    } else {
        (delta * (2.0 * s - delta), delta / s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    pub min_parallax_px: f64,
    pub max_mean_reprojection_px: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self { min_parallax_px: 8.0, max_mean_reprojection_px: 3.0 }
    }
}

/// Largest pairwise pixel displacement after removing the relative rotation
/// between views. `views` holds world-to-camera transforms.
pub fn parallax(views: &[(Pose3, Vector2<f64>)], cam: &CameraModel) -> f64 {
    let mut best: f64 = 0.0;
    for (i, (ti, zi)) in views.iter().enumerate() {
        for (tj, zj) in &views[i + 1..] {
            // rotation taking camera-j directions into camera i
            let r_ij: Rot3 = ti.rotation * tj.rotation.inverse();
            let dir = r_ij.rotate(&cam.ray(zj));
            if dir.z <= 1e-9 {
                continue;
            }
            best = best.max((cam.pixel(&dir) - zi).norm());
        }
    }
    best
}

/// Linear multi-view triangulation with parallax, cheirality and
/// reprojection gates. `views` holds world-to-camera transforms.
pub fn triangulate(
    views: &[(Pose3, Vector2<f64>)],
    cam: &CameraModel,
    cfg: &TriangulationConfig,
) -> Result<Vector3<f64>, VisualError> {
    if views.len() < 2 {
        return Err(VisualError::TooFewViews(views.len()));
    }
    let par = parallax(views, cam);
    if par < cfg.min_parallax_px {
        return Err(VisualError::Deferred(par));
    }
    let mut a = DMatrix::<f64>::zeros(2 * views.len(), 4);
    for (k, (t, z)) in views.iter().enumerate() {
        let ray = cam.ray(z);
        let m = t.matrix();
        for c in 0..4 {
            a[(2 * k, c)] = ray.x * m[(2, c)] - m[(0, c)];
            a[(2 * k + 1, c)] = ray.y * m[(2, c)] - m[(1, c)];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(VisualError::Rejected("decomposition failed"))?;
    let (imin, _) = svd.singular_values.argmin();
    let h = Vector4::from_iterator(v_t.row(imin).iter().copied());
    if h[3].abs() < 1e-12 {
        return Err(VisualError::Rejected("point at infinity"));
    }
    let point = h.fixed_rows::<3>(0) / h[3];
    let mut err = 0.0;
    for (t, z) in views {
        let pc = t.transform_point(&point);
        if pc.z <= MIN_DEPTH {
            return Err(VisualError::Rejected("negative depth"));
        }
        err += (cam.pixel(&pc) - z).norm();
    }
    if err / views.len() as f64 >= cfg.max_mean_reprojection_px {
        return Err(VisualError::Rejected("reprojection gate"));
    }
    Ok(point)
}
