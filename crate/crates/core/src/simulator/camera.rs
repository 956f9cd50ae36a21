//! Pinhole camera, planar checkerboard and corner-based pose recovery.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::so3::orthonormalize;
use crate::geometry::Pose;
use crate::optimizer::{lm_minimize, marginal_covariance, FnResidual, LmParams, ParameterBlock, ResidualBlock, SolverError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeCamera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for PinholeCamera {
    fn default() -> Self {
        Self { focal: 620.0, cx: 640.0, cy: 512.0, width: 1280.0, height: 1024.0 }
    }
}

impl PinholeCamera {
    /// Pixel coordinates of a camera-frame point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(self.focal * p.x / p.z + self.cx, self.focal * p.y / p.z + self.cy))
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width && px.y < self.height
    }

    fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.focal, (px.y - self.cy) / self.focal)
    }
}

/// Inner-corner grid of a planar checkerboard in the plane `z = 0`, centred
/// on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkerboard {
    pub rows: usize,
    pub cols: usize,
    pub square: f64,
}

impl Default for Checkerboard {
    /// 12×10 squares of 9.9 cm, i.e. 11×9 inner corners.
    fn default() -> Self {
        Self { rows: 9, cols: 11, square: 0.099 }
    }
}

impl Checkerboard {
    pub fn corners(&self) -> Vec<Vector3<f64>> {
        let ox = 0.5 * (self.cols as f64 - 1.0) * self.square;
        let oy = 0.5 * (self.rows as f64 - 1.0) * self.square;
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(Vector3::new(c as f64 * self.square - ox, r as f64 * self.square - oy, 0.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CameraError {
    #[error("target not visible: {0}")]
    NotVisible(&'static str),
    #[error("pose recovery failed: {0}")]
    PoseRecovery(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Projects world points through `T_cw`; fails unless every point lands in
/// the image in front of the camera.
pub fn project_points(cam: &PinholeCamera, points: &[Vector3<f64>], t_cw: &Pose) -> Result<Vec<Vector2<f64>>, CameraError> {
    points
        .iter()
        .map(|p| {
            let px = cam.project(&t_cw.transform_point(p)).ok_or(CameraError::NotVisible("point behind camera"))?;
            if cam.in_image(&px) {
                Ok(px)
            } else {
                Err(CameraError::NotVisible("point outside image"))
            }
        })
        .collect()
}

/// Plane-to-image homography by normalized DLT. `plane` holds `(x, y)` on
/// the target; `image` holds normalized image coordinates.
pub fn estimate_homography(plane: &[Vector2<f64>], image: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    if plane.len() < 4 || plane.len() != image.len() {
        return None;
    }
    let conditioner = |pts: &[Vector2<f64>]| {
        let n = pts.len() as f64;
        let mean = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
        let spread = pts.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
        let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
        Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
    };
    let ta = conditioner(plane);
    let tb = conditioner(image);
    let mut a = DMatrix::zeros(2 * plane.len(), 9);
    for (i, (p, q)) in plane.iter().zip(image).enumerate() {
        let p = ta * Vector3::new(p.x, p.y, 1.0);
        let q = tb * Vector3::new(q.x, q.y, 1.0);
        let (x, y) = (p.x / p.z, p.y / p.z);
        let (u, v) = (q.x / q.z, q.y / q.z);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    // Null vector of A from the eigen-decomposition of AᵀA.
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (min_idx, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = eig.eigenvectors.column(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let hm = tb.try_inverse()? * hn * ta;
    Some(hm)
}

/// Pose `T_cw` of a `z = 0` target from its homography in normalized image
/// coordinates.
pub fn pose_from_homography(h: &Matrix3<f64>) -> Option<Pose> {
    let (h1, h2, h3) = (h.column(0).into_owned(), h.column(1).into_owned(), h.column(2).into_owned());
    let norm = 0.5 * (h1.norm() + h2.norm());
    if norm <= 0.0 {
        return None;
    }
    let mut lambda = 1.0 / norm;
    // Target must sit in front of the camera.
    if h3.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let r1 = lambda * h1;
    let r2 = lambda * h2;
    let r3 = r1.cross(&r2);
    let rot = orthonormalize(&Matrix3::from_columns(&[r1, r2, r3]));
    Some(Pose::new(rot, lambda * h3))
}

/// Recovers `T_cw` from pixel observations of known target points by
/// minimizing reprojection error, and returns the pose with its covariance
/// in the left-perturbation coordinates of [`Pose::boxplus`], translation
/// first. `pixel_sigma` scales the covariance and must be positive.
pub fn solve_pnp(
    cam: &PinholeCamera,
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    pixel_sigma: f64,
    lm: &LmParams,
) -> Result<(Pose, Matrix6<f64>), CameraError> {
    if points.len() != pixels.len() || points.len() < 4 {
        return Err(CameraError::PoseRecovery("need at least four correspondences".into()));
    }
    if !(pixel_sigma > 0.0) {
        return Err(CameraError::PoseRecovery("pixel sigma must be positive".into()));
    }
    if points.iter().any(|p| p.z != 0.0) {
        return Err(CameraError::PoseRecovery("target points must lie in z = 0".into()));
    }
    let plane: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new(p.x, p.y)).collect();
    let normalized: Vec<Vector2<f64>> = pixels.iter().map(|p| cam.normalize(p)).collect();
    let h = estimate_homography(&plane, &normalized).ok_or_else(|| CameraError::PoseRecovery("degenerate homography".into()))?;
    let init = pose_from_homography(&h).ok_or_else(|| CameraError::PoseRecovery("invalid homography".into()))?;

    let residual_at = |base: Pose| {
        let pts = points.to_vec();
        let obs = pixels.to_vec();
        let cam = *cam;
        FnResidual::new(2 * pts.len(), vec![0], move |blocks: &[&ParameterBlock]| {
            let xi = Vector6::from_column_slice(blocks[0].as_euclidean().expect("euclidean block").as_slice());
            let pose = base.boxplus(&xi);
            let mut r = DVector::zeros(2 * pts.len());
            for (i, (p, o)) in pts.iter().zip(&obs).enumerate() {
                let pc = pose.transform_point(p);
                // Points behind the camera get a large finite residual.
                let z = pc.z.max(1e-6);
                r[2 * i] = (cam.focal * pc.x / z + cam.cx - o.x) / pixel_sigma;
                r[2 * i + 1] = (cam.focal * pc.y / z + cam.cy - o.y) / pixel_sigma;
            }
            r
        })
    };

    let res = residual_at(init);
    let (blocks, _) = lm_minimize(&[&res as &dyn ResidualBlock], vec![ParameterBlock::euclidean(DVector::zeros(6))], lm)?;
    let xi = Vector6::from_column_slice(blocks[0].as_euclidean().expect("euclidean block").as_slice());
    let pose = init.boxplus(&xi);

    let res = residual_at(pose);
    let cov = marginal_covariance(&[&res as &dyn ResidualBlock], &[ParameterBlock::euclidean(DVector::zeros(6))], &[0])?;
    Ok((pose, Matrix6::from_fn(|i, j| cov[(i, j)])))
}
