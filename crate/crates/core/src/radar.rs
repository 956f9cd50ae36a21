//! Instantaneous radar ego-velocity from a single scan of Doppler returns.
//!
//! A stationary target seen along unit direction `u` by a sensor moving with
//! velocity `v` has range rate `ṙ = −uᵀ·v`. Three non-coplanar returns pin
//! down `v`; MLESAC over minimal three-point samples rejects moving targets
//! and clutter, and the surviving inliers are refined by iteratively
//! reweighted least squares.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest accepted condition number of a stacked direction matrix.
pub const MAX_CONDITION: f64 = 1e6;

/// Inlier gate as a multiple of `inlier_sigma`.
const INLIER_GATE: f64 = 3.0;

/// Huber threshold of the refinement, as a multiple of `inlier_sigma`.
const HUBER_K: f64 = 1.345;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VelocityError {
    #[error("scan has {got} detections, at least {need} required")]
    TooFewDetections { got: usize, need: usize },
    #[error("degenerate detection geometry (condition number {condition:.3e})")]
    Singular { condition: f64 },
    #[error("best hypothesis has {support} inliers, {required} required")]
    EstimationFailed { support: usize, required: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// One radar return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarDetection {
    pub t: f64,
    pub range: f64,
    pub azimuth: f64,
    pub elevation: f64,
    pub range_rate: f64,
    pub intensity: f64,
}

impl RadarDetection {
    /// Builds a detection from a (not necessarily unit) direction vector.
    pub fn from_direction(t: f64, range: f64, direction: &Vector3<f64>, range_rate: f64, intensity: f64) -> Self {
        let u = direction.normalize();
        let mut azimuth = u.y.atan2(u.x);
        if azimuth <= -std::f64::consts::PI {
            azimuth = std::f64::consts::PI;
        }
        let elevation = u.z.clamp(-1.0, 1.0).asin();
        Self { t, range, azimuth, elevation, range_rate, intensity }
    }

    pub fn direction(&self) -> Vector3<f64> {
        direction_vector(self)
    }

    pub fn validate(&self) -> Result<(), String> {
        use std::f64::consts::{FRAC_PI_2, PI};
        let finite = [self.t, self.range, self.azimuth, self.elevation, self.range_rate, self.intensity]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err("non-finite field".into());
        }
        if self.range <= 0.0 {
            return Err(format!("range {} must be positive", self.range));
        }
        if !(self.azimuth > -PI && self.azimuth <= PI) {
            return Err(format!("azimuth {} outside (-pi, pi]", self.azimuth));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&self.elevation) {
            return Err(format!("elevation {} outside [-pi/2, pi/2]", self.elevation));
        }
        if self.intensity < 0.0 {
            return Err(format!("intensity {} must be nonnegative", self.intensity));
        }
        Ok(())
    }
}

/// Ego-velocity of the radar in its own frame, with covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityEstimate {
    pub t: f64,
    pub v: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub inlier_count: usize,
    pub total_count: usize,
}

impl VelocityEstimate {
    /// Covariance with each diagonal variance raised to at least `floor²`.
    /// Adding a nonnegative diagonal keeps the matrix positive semidefinite.
    pub fn floored_covariance(&self, floor: &Vector3<f64>) -> Matrix3<f64> {
        let mut c = self.covariance;
        for i in 0..3 {
            let min_var = floor[i] * floor[i];
            if c[(i, i)] < min_var {
                c[(i, i)] = min_var;
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlesacParams {
    pub max_iterations: usize,
    /// Standard deviation of inlier range-rate residuals, m/s.
    pub inlier_sigma: f64,
    pub confidence: f64,
    pub min_inliers: usize,
}

impl Default for MlesacParams {
    fn default() -> Self {
        Self { max_iterations: 200, inlier_sigma: 0.05, confidence: 0.99, min_inliers: 5 }
    }
}

impl MlesacParams {
    pub fn validate(&self) -> Result<(), VelocityError> {
        let bad = |m: &str| Err(VelocityError::InvalidParams(m.to_string()));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(self.inlier_sigma > 0.0) {
            return bad("inlier_sigma must be positive");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if self.min_inliers == 0 {
            return bad("min_inliers must be positive");
        }
        Ok(())
    }
}

/// Unit line-of-sight vector `(cos e·cos a, cos e·sin a, sin e)`.
pub fn direction_vector(d: &RadarDetection) -> Vector3<f64> {
    let (se, ce) = d.elevation.sin_cos();
    let (sa, ca) = d.azimuth.sin_cos();
    Vector3::new(ce * ca, ce * sa, se)
}

/// Residual `ṙ + uᵀ·v` of one detection under the static-world model.
#[inline]
pub fn range_rate_residual(d: &RadarDetection, v: &Vector3<f64>) -> f64 {
    d.range_rate + direction_vector(d).dot(v)
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Exact ego-velocity from three returns with independent directions.
pub fn solve_velocity_3pt(d1: &RadarDetection, d2: &RadarDetection, d3: &RadarDetection) -> Result<Vector3<f64>, VelocityError> {
    let a = Matrix3::from_rows(&[
        direction_vector(d1).transpose(),
        direction_vector(d2).transpose(),
        direction_vector(d3).transpose(),
    ]);
    let condition = condition_number(&a);
    if !(condition < MAX_CONDITION) {
        return Err(VelocityError::Singular { condition });
    }
    let b = -Vector3::new(d1.range_rate, d2.range_rate, d3.range_rate);
    a.lu().solve(&b).ok_or(VelocityError::Singular { condition })
}

/// Refines `v0` over an inlier set by Huber-weighted IRLS on range-rate
/// residuals. The covariance is `σ²·(AᵀWA)⁻¹` from the final normal
/// equations, with `σ = inlier_sigma`.
pub fn refine_inliers(inliers: &[RadarDetection], v0: &Vector3<f64>, inlier_sigma: f64) -> Result<(Vector3<f64>, Matrix3<f64>), VelocityError> {
    if inliers.len() < 3 {
        return Err(VelocityError::TooFewDetections { got: inliers.len(), need: 3 });
    }
    let dirs: Vec<Vector3<f64>> = inliers.iter().map(direction_vector).collect();
    let huber = HUBER_K * inlier_sigma;

    let mut v = *v0;
    let mut info = Matrix3::zeros();
    for _ in 0..20 {
        info = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for (d, u) in inliers.iter().zip(&dirs) {
            let r = d.range_rate + u.dot(&v);
            let w = if r.abs() <= huber { 1.0 } else { huber / r.abs() };
            info += w * u * u.transpose();
            rhs -= w * d.range_rate * u;
        }
        let condition = condition_number(&info);
        if !(condition < MAX_CONDITION * MAX_CONDITION) {
            return Err(VelocityError::Singular { condition: condition.sqrt() });
        }
        let next = info.cholesky().ok_or(VelocityError::Singular { condition: f64::INFINITY })?.solve(&rhs);
        let step = (next - v).norm();
        v = next;
        if step <= 1e-12 * (1.0 + v.norm()) {
            break;
        }
    }
    let cov = info
        .try_inverse()
        .ok_or(VelocityError::Singular { condition: f64::INFINITY })?
        * (inlier_sigma * inlier_sigma);
    Ok((v, 0.5 * (cov + cov.transpose())))
}

/// Negative log-likelihood of residuals under a Gaussian-inlier /
/// uniform-outlier mixture, with the mixing weight fitted by EM.
fn mlesac_cost(residuals: &[f64], sigma: f64, outlier_density: f64) -> f64 {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let inlier_pdf: Vec<f64> = residuals
        .iter()
        .map(|r| norm * (-0.5 * (r / sigma).powi(2)).exp())
        .collect();
    let mut gamma = 0.5;
    for _ in 0..5 {
        let mean_post: f64 = inlier_pdf
            .iter()
            .map(|p| {
                let a = gamma * p;
                a / (a + (1.0 - gamma) * outlier_density)
            })
            .sum::<f64>()
            / residuals.len() as f64;
        gamma = mean_post.clamp(1e-6, 1.0 - 1e-6);
    }
    -inlier_pdf
        .iter()
        .map(|p| (gamma * p + (1.0 - gamma) * outlier_density).ln())
        .sum::<f64>()
}

fn gate(scan: &[RadarDetection], v: &Vector3<f64>, threshold: f64) -> Vec<usize> {
    scan.iter()
        .enumerate()
        .filter(|(_, d)| range_rate_residual(d, v).abs() <= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Robust ego-velocity of one scan.
///
/// Hypotheses from random three-detection samples are scored by the MLESAC
/// mixture likelihood; sampling stops early once the required number of
/// iterations for `confidence` is reached. The best hypothesis' inliers
/// (residual within 3σ) are refined with [`refine_inliers`], re-gated and
/// refined again until the inlier set is stable.
pub fn mlesac_velocity<R: Rng + ?Sized>(scan: &[RadarDetection], params: &MlesacParams, rng: &mut R) -> Result<VelocityEstimate, VelocityError> {
    params.validate()?;
    let n = scan.len();
    if n < 3 {
        return Err(VelocityError::TooFewDetections { got: n, need: 3 });
    }
    let sigma = params.inlier_sigma;
    let threshold = INLIER_GATE * sigma;
    let max_rate = scan.iter().map(|d| d.range_rate.abs()).fold(0.0, f64::max);
    let outlier_density = 1.0 / (2.0 * max_rate + 10.0 * sigma);

    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut required = params.max_iterations as f64;
    let mut iteration = 0usize;
    while iteration < params.max_iterations && (iteration as f64) < required {
        iteration += 1;
        let idx = rand::seq::index::sample(rng, n, 3);
        let v = match solve_velocity_3pt(&scan[idx.index(0)], &scan[idx.index(1)], &scan[idx.index(2)]) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let residuals: Vec<f64> = scan.iter().map(|d| range_rate_residual(d, &v)).collect();
        let cost = mlesac_cost(&residuals, sigma, outlier_density);
        if best.map_or(true, |(c, _)| cost < c) {
            best = Some((cost, v));
            let w = residuals.iter().filter(|r| r.abs() <= threshold).count() as f64 / n as f64;
            required = if w >= 1.0 {
                0.0
            } else {
                let p_good = w.powi(3);
                if p_good <= 0.0 {
                    f64::INFINITY
                } else {
                    (1.0 - params.confidence).ln() / (1.0 - p_good).ln()
                }
            };
        }
    }

    let (_, v_hyp) = best.ok_or(VelocityError::EstimationFailed { support: 0, required: params.min_inliers })?;
    let mut inliers = gate(scan, &v_hyp, threshold);
    if inliers.len() < params.min_inliers.max(3) {
        return Err(VelocityError::EstimationFailed { support: inliers.len(), required: params.min_inliers });
    }
    let mut v = v_hyp;
    let mut cov;
    loop {
        let set: Vec<RadarDetection> = inliers.iter().map(|&i| scan[i]).collect();
        (v, cov) = refine_inliers(&set, &v, sigma)?;
        let next = gate(scan, &v, threshold);
        if next == inliers || next.len() < params.min_inliers.max(3) {
            break;
        }
        inliers = next;
    }
    let t = scan.iter().map(|d| d.t).sum::<f64>() / n as f64;
    Ok(VelocityEstimate { t, v, covariance: cov, inlier_count: inliers.len(), total_count: n })
}

/// Indices of detections the estimate treats as inliers.
pub fn inlier_indices(scan: &[RadarDetection], estimate: &VelocityEstimate, params: &MlesacParams) -> Vec<usize> {
    gate(scan, &estimate.v, INLIER_GATE * params.inlier_sigma)
}
