//! Uniform cumulative B-splines on ℝ³ and on SO(3).
//!
//! A spline of order `k` over `n` control points has knots `t_i = t0 + i·Δt`
//! and `n − k + 1` segments. Segment `i` covers `[t_i, t_{i+1})` and blends
//! control points `i..i+k`. The cumulative form writes the curve as the first
//! control point of the window plus weighted successive differences, which
//! carries over to rotations by replacing differences with relative
//! rotations in the Lie algebra.

use nalgebra::{DMatrix, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pose::Pose;
use super::so3::{exp_so3, log_so3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("time {t} outside spline domain [{start}, {end})")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("invalid spline configuration: {0}")]
    InvalidConfig(String),
}

/// Knot layout of a uniform spline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub order: usize,
    pub knot_spacing: f64,
    pub t0: f64,
    pub num_control_points: usize,
}

impl SplineConfig {
    pub fn new(order: usize, knot_spacing: f64, t0: f64, num_control_points: usize) -> Result<Self, SplineError> {
        let cfg = Self { order, knot_spacing, t0, num_control_points };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Smallest spline of the given order whose domain contains
    /// `[t_first, t_last]` with half a knot of margin on both sides.
    pub fn covering(order: usize, knot_spacing: f64, t_first: f64, t_last: f64) -> Result<Self, SplineError> {
        if !(t_last >= t_first) {
            return Err(SplineError::InvalidConfig(format!(
                "empty time span [{t_first}, {t_last}]"
            )));
        }
        let t0 = t_first - 0.5 * knot_spacing;
        let segments = ((t_last - t0) / knot_spacing).floor() as usize + 1;
        Self::new(order, knot_spacing, t0, segments + order - 1)
    }

    pub fn validate(&self) -> Result<(), SplineError> {
        if self.order < 2 {
            return Err(SplineError::InvalidConfig(format!("order {} < 2", self.order)));
        }
        if !(self.knot_spacing > 0.0) || !self.knot_spacing.is_finite() {
            return Err(SplineError::InvalidConfig(format!(
                "knot spacing {} must be positive",
                self.knot_spacing
            )));
        }
        if !self.t0.is_finite() {
            return Err(SplineError::InvalidConfig("t0 must be finite".into()));
        }
        if self.num_control_points < self.order {
            return Err(SplineError::InvalidConfig(format!(
                "{} control points is fewer than the order {}",
                self.num_control_points, self.order
            )));
        }
        Ok(())
    }

    pub fn num_segments(&self) -> usize {
        self.num_control_points - self.order + 1
    }

    pub fn start(&self) -> f64 {
        self.t0
    }

    /// Exclusive end of the evaluation domain.
    pub fn end(&self) -> f64 {
        self.knot_time(self.num_segments())
    }

    pub fn knot_time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.knot_spacing
    }

    pub fn contains(&self, t: f64) -> bool {
        self.normalized_time(t).is_ok()
    }

    /// Segment index and normalized time `u ∈ [0, 1)` for `t`.
    pub fn normalized_time(&self, t: f64) -> Result<(usize, f64), SplineError> {
        let err = || SplineError::OutOfDomain { t, start: self.start(), end: self.end() };
        if !t.is_finite() {
            return Err(err());
        }
        let s = (t - self.t0) / self.knot_spacing;
        if s < 0.0 {
            return Err(err());
        }
        let i = s.floor() as usize;
        if i >= self.num_segments() {
            return Err(err());
        }
        let u = (s - i as f64).clamp(0.0, 1.0 - f64::EPSILON);
        Ok((i, u))
    }

    /// Index range of the control points blended by segment `i`.
    pub fn window(&self, segment: usize) -> std::ops::Range<usize> {
        segment..segment + self.order
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Cumulative mixing matrix of a uniform B-spline of order `k`.
///
/// Row `a`, column `n` holds `Σ_{s=a}^{k−1} m(s, n)` with
/// `m(s, n) = C(k−1, n)/(k−1)! · Σ_{l=s}^{k−1} (−1)^{l−s} C(k, l−s) (k−1−l)^{k−1−n}`.
/// Multiplying by `(1, u, …, u^{k−1})` yields the cumulative weights `λ`.
pub fn mixing_matrix(k: usize) -> DMatrix<f64> {
    assert!(k >= 2, "spline order must be at least 2");
    let base = DMatrix::from_fn(k, k, |s, n| {
        let sum: f64 = (s..k)
            .map(|l| {
                let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
                sign * binomial(k, l - s) * ((k - 1 - l) as f64).powi((k - 1 - n) as i32)
            })
            .sum();
        binomial(k - 1, n) / factorial(k - 1) * sum
    });
    DMatrix::from_fn(k, k, |a, n| (a..k).map(|s| base[(s, n)]).sum())
}

/// Precomputed mixing matrix with helpers for weights and their derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeBasis {
    order: usize,
    mixing: DMatrix<f64>,
}

impl CumulativeBasis {
    pub fn new(order: usize) -> Self {
        Self { order, mixing: mixing_matrix(order) }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    /// Cumulative weights `λ_0..λ_{k−1}` at `u`; `λ_0` is always 1.
    pub fn weights(&self, u: f64) -> Vec<f64> {
        let k = self.order;
        let mut powers = vec![1.0; k];
        for n in 1..k {
            powers[n] = powers[n - 1] * u;
        }
        (0..k)
            .map(|a| (0..k).map(|n| self.mixing[(a, n)] * powers[n]).sum())
            .collect()
    }

    /// `dλ/du` at `u`.
    pub fn weight_derivatives(&self, u: f64) -> Vec<f64> {
        let k = self.order;
        let mut dpowers = vec![0.0; k];
        let mut p = 1.0;
        for n in 1..k {
            dpowers[n] = n as f64 * p;
            p *= u;
        }
        (0..k)
            .map(|a| (0..k).map(|n| self.mixing[(a, n)] * dpowers[n]).sum())
            .collect()
    }
}

/// Value and time derivative of a vector spline segment given its window
/// of control points and the weights at the evaluation time.
pub fn blend_translation(points: &[Vector3<f64>], lambda: &[f64], dlambda: &[f64], dt: f64) -> (Vector3<f64>, Vector3<f64>) {
    let mut p = points[0];
    let mut v = Vector3::zeros();
    for j in 1..points.len() {
        let d = points[j] - points[j - 1];
        p += lambda[j] * d;
        v += dlambda[j] * d;
    }
    (p, v / dt)
}

/// Value and body-frame angular velocity (`[ω]× = RᵀṘ`) of a rotation
/// spline segment.
pub fn blend_rotation(points: &[Rotation3<f64>], lambda: &[f64], dlambda: &[f64], dt: f64) -> (Rotation3<f64>, Vector3<f64>) {
    let mut r = points[0];
    let mut omega = Vector3::zeros();
    for j in 1..points.len() {
        let phi = log_so3(&(points[j - 1].inverse() * points[j]));
        let step = exp_so3(&(lambda[j] * phi));
        r *= step;
        omega = step.inverse() * omega + dlambda[j] * phi;
    }
    (r, omega / dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationSpline {
    config: SplineConfig,
    basis: CumulativeBasis,
    control_points: Vec<Vector3<f64>>,
}

impl TranslationSpline {
    pub fn new(config: SplineConfig, control_points: Vec<Vector3<f64>>) -> Result<Self, SplineError> {
        config.validate()?;
        if control_points.len() != config.num_control_points {
            return Err(SplineError::InvalidConfig(format!(
                "expected {} control points, got {}",
                config.num_control_points,
                control_points.len()
            )));
        }
        Ok(Self { basis: CumulativeBasis::new(config.order), config, control_points })
    }

    /// All control points set to `p`.
    pub fn constant(config: SplineConfig, p: Vector3<f64>) -> Result<Self, SplineError> {
        Self::new(config, vec![p; config.num_control_points])
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn control_points(&self) -> &[Vector3<f64>] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.control_points
    }

    pub fn evaluate(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        Ok(self.evaluate_with_velocity(t)?.0)
    }

    pub fn velocity(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        Ok(self.evaluate_with_velocity(t)?.1)
    }

    pub fn evaluate_with_velocity(&self, t: f64) -> Result<(Vector3<f64>, Vector3<f64>), SplineError> {
        let (i, u) = self.config.normalized_time(t)?;
        let lambda = self.basis.weights(u);
        let dlambda = self.basis.weight_derivatives(u);
        Ok(blend_translation(
            &self.control_points[self.config.window(i)],
            &lambda,
            &dlambda,
            self.config.knot_spacing,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpline {
    config: SplineConfig,
    basis: CumulativeBasis,
    control_points: Vec<Rotation3<f64>>,
}

impl RotationSpline {
    pub fn new(config: SplineConfig, control_points: Vec<Rotation3<f64>>) -> Result<Self, SplineError> {
        config.validate()?;
        if control_points.len() != config.num_control_points {
            return Err(SplineError::InvalidConfig(format!(
                "expected {} control points, got {}",
                config.num_control_points,
                control_points.len()
            )));
        }
        Ok(Self { basis: CumulativeBasis::new(config.order), config, control_points })
    }

    pub fn constant(config: SplineConfig, r: Rotation3<f64>) -> Result<Self, SplineError> {
        Self::new(config, vec![r; config.num_control_points])
    }

    pub fn config(&self) -> &SplineConfig {
        &self.config
    }

    pub fn control_points(&self) -> &[Rotation3<f64>] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [Rotation3<f64>] {
        &mut self.control_points
    }

    pub fn evaluate(&self, t: f64) -> Result<Rotation3<f64>, SplineError> {
        Ok(self.evaluate_with_velocity(t)?.0)
    }

    /// Body-frame angular velocity in rad/s.
    pub fn angular_velocity(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        Ok(self.evaluate_with_velocity(t)?.1)
    }

    pub fn evaluate_with_velocity(&self, t: f64) -> Result<(Rotation3<f64>, Vector3<f64>), SplineError> {
        let (i, u) = self.config.normalized_time(t)?;
        let lambda = self.basis.weights(u);
        let dlambda = self.basis.weight_derivatives(u);
        Ok(blend_rotation(
            &self.control_points[self.config.window(i)],
            &lambda,
            &dlambda,
            self.config.knot_spacing,
        ))
    }
}

/// Split-representation pose trajectory: translation and rotation splines
/// sharing one knot layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpline {
    pub translation: TranslationSpline,
    pub rotation: RotationSpline,
}

/// Pose and first-order kinematics of a trajectory at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub pose: Pose,
    /// Time derivative of the translation, world frame.
    pub world_velocity: Vector3<f64>,
    /// Body-frame linear velocity, `Rᵀ·ṙ`.
    pub body_velocity: Vector3<f64>,
    /// Body-frame angular velocity.
    pub angular_velocity: Vector3<f64>,
}

impl TrajectorySpline {
    pub fn new(translation: TranslationSpline, rotation: RotationSpline) -> Result<Self, SplineError> {
        if translation.config() != rotation.config() {
            return Err(SplineError::InvalidConfig(
                "translation and rotation splines must share a knot layout".into(),
            ));
        }
        Ok(Self { translation, rotation })
    }

    pub fn constant(config: SplineConfig, pose: Pose) -> Result<Self, SplineError> {
        Self::new(
            TranslationSpline::constant(config, pose.translation)?,
            RotationSpline::constant(config, pose.rotation)?,
        )
    }

    pub fn config(&self) -> &SplineConfig {
        self.translation.config()
    }

    pub fn pose(&self, t: f64) -> Result<Pose, SplineError> {
        Ok(Pose::new(self.rotation.evaluate(t)?, self.translation.evaluate(t)?))
    }

    pub fn sample(&self, t: f64) -> Result<TrajectorySample, SplineError> {
        let (p, v) = self.translation.evaluate_with_velocity(t)?;
        let (r, w) = self.rotation.evaluate_with_velocity(t)?;
        Ok(TrajectorySample {
            pose: Pose::new(r, p),
            world_velocity: v,
            body_velocity: r.inverse() * v,
            angular_velocity: w,
        })
    }
}
