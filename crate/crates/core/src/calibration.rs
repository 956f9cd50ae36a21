//! Batch estimation of the radar trajectory and the radar-to-camera
//! transform from radar ego-velocities and camera poses.
//!
//! Frames: `w` world, `r` radar, `c` camera. The trajectory spline models
//! `T_wr(t)`; the extrinsics are `T_cr = (R_cr, r_c^{rc})`, mapping radar
//! coordinates to camera coordinates. A camera measurement is `T_cw(t)`.
//!
//! Residuals:
//! - velocity: `e_v = v_meas − R_wr(t)ᵀ·ṙ_wr(t)`
//! - pose: `T_err = T_cw(t)·T_wr(t)·T_cr⁻¹`, `e_p = [r_err; log(R_err)]`
//!
//! Both are whitened by the inverse Cholesky factor of their covariance, so
//! the weighted cost is a plain sum of squares for the solver.

use nalgebra::{DVector, Matrix3, Matrix6, Rotation3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::spline::{blend_rotation, blend_translation, CumulativeBasis};
use crate::geometry::{log_so3, skew, Pose, RotationSpline, SplineConfig, SplineError, TrajectorySpline, TranslationSpline};
use crate::optimizer::{lm_minimize, marginal_covariance, total_cost, LmParams, ParameterBlock, ResidualBlock, SolveReport, SolverError};
use crate::radar::VelocityEstimate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error(transparent)]
    Domain(#[from] SplineError),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid measurement: {0}")]
    InvalidMeasurement(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Camera pose measurement `T_cw` at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMeasurement {
    pub t: f64,
    pub pose: Pose,
    /// Translation block first (m²), then rotation (rad²).
    pub covariance: Matrix6<f64>,
}

/// Default pose covariance: (1 cm)² translation, (0.5°)² rotation.
pub fn default_pose_covariance() -> Matrix6<f64> {
    let rot = 0.5f64.to_radians().powi(2);
    Matrix6::from_diagonal(&Vector6::new(1e-4, 1e-4, 1e-4, rot, rot, rot))
}

impl PoseMeasurement {
    pub fn new(t: f64, pose: Pose) -> Self {
        Self { t, pose, covariance: default_pose_covariance() }
    }
}

/// Radar-to-camera transform `T_cr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn as_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn from_pose(p: &Pose) -> Self {
        Self { rotation: p.rotation, translation: p.translation }
    }

    /// Translation error norm (m) and rotation error angle (rad) against
    /// a reference.
    pub fn error_to(&self, truth: &Extrinsics) -> (f64, f64) {
        let dt = (self.translation - truth.translation).norm();
        let dr = log_so3(&(self.rotation * truth.rotation.inverse())).norm();
        (dt, dr)
    }
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    Fixed,
    Estimated,
}

/// How the velocity covariance `Σ_v` is chosen per measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum VelocityNoise {
    /// The scan's own covariance with per-axis standard deviations raised to
    /// at least `floor` (m/s).
    PerScan { floor: Vector3<f64> },
    /// The same diagonal covariance for every scan.
    Constant { sigma: Vector3<f64> },
}

impl Default for VelocityNoise {
    fn default() -> Self {
        VelocityNoise::PerScan { floor: Vector3::new(0.03, 0.06, 0.1) }
    }
}

impl VelocityNoise {
    pub fn covariance(&self, est: &VelocityEstimate) -> Matrix3<f64> {
        match self {
            VelocityNoise::PerScan { floor } => est.floored_covariance(floor),
            VelocityNoise::Constant { sigma } => Matrix3::from_diagonal(&sigma.component_mul(sigma)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemOptions {
    pub spline_order: usize,
    /// Knot spacing Δt in seconds.
    pub knot_spacing: f64,
    pub scale_mode: ScaleMode,
    pub velocity_noise: VelocityNoise,
    /// Seconds added to radar timestamps at ingestion; recorded here for
    /// reporting only.
    pub time_offset: f64,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        Self {
            spline_order: 4,
            knot_spacing: 0.1,
            scale_mode: ScaleMode::Fixed,
            velocity_noise: VelocityNoise::default(),
            time_offset: 0.0,
        }
    }
}

/// Measurements plus the current estimate of every unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationProblem {
    pub velocity_measurements: Vec<VelocityEstimate>,
    pub pose_measurements: Vec<PoseMeasurement>,
    /// `T_wr(t)`.
    pub trajectory: TrajectorySpline,
    pub extrinsics: Extrinsics,
    /// Multiplier applied to measured camera translations.
    pub scale: f64,
    pub options: ProblemOptions,
}

/// Lower-triangular `W` with `WᵀW = Σ⁻¹`, i.e. the inverse Cholesky factor.
fn whitening<const D: usize>(cov: &SMatrix<f64, D, D>) -> Result<SMatrix<f64, D, D>, CalibrationError> {
    let sym = 0.5 * (cov + cov.transpose());
    let chol = sym
        .cholesky()
        .ok_or_else(|| CalibrationError::InvalidMeasurement("covariance is not positive definite".into()))?;
    let l = chol.l();
    l.solve_lower_triangular(&SMatrix::<f64, D, D>::identity())
        .ok_or_else(|| CalibrationError::InvalidMeasurement("covariance is singular".into()))
}

impl CalibrationProblem {
    /// Creates a problem whose spline covers the pose measurements, with a
    /// constant placeholder trajectory, identity extrinsics and unit scale.
    /// Call [`initialize`] before solving.
    pub fn new(
        velocity_measurements: Vec<VelocityEstimate>,
        mut pose_measurements: Vec<PoseMeasurement>,
        options: ProblemOptions,
    ) -> Result<Self, CalibrationError> {
        if pose_measurements.len() < 2 {
            return Err(CalibrationError::InsufficientData(format!(
                "{} pose measurements, at least 2 required",
                pose_measurements.len()
            )));
        }
        if velocity_measurements.is_empty() {
            return Err(CalibrationError::InsufficientData("no velocity measurements".into()));
        }
        pose_measurements.sort_by(|a, b| a.t.total_cmp(&b.t));
        let t_first = pose_measurements[0].t;
        let t_last = pose_measurements[pose_measurements.len() - 1].t;
        let config = SplineConfig::covering(options.spline_order, options.knot_spacing, t_first, t_last)?;
        for v in &velocity_measurements {
            config.normalized_time(v.t)?;
            whitening(&options.velocity_noise.covariance(v))?;
        }
        for p in &pose_measurements {
            whitening(&p.covariance)?;
        }
        let trajectory = TrajectorySpline::constant(config, Pose::identity())?;
        Ok(Self {
            velocity_measurements,
            pose_measurements,
            trajectory,
            extrinsics: Extrinsics::identity(),
            scale: 1.0,
            options,
        })
    }

    pub fn spline_config(&self) -> &SplineConfig {
        self.trajectory.config()
    }

    fn layout(&self) -> BlockLayout {
        BlockLayout { n: self.spline_config().num_control_points }
    }

    fn to_blocks(&self, fix_extrinsics: bool) -> Vec<ParameterBlock> {
        let mut blocks: Vec<ParameterBlock> = self
            .trajectory
            .translation
            .control_points()
            .iter()
            .map(ParameterBlock::vector3)
            .collect();
        blocks.extend(self.trajectory.rotation.control_points().iter().map(|r| ParameterBlock::rotation(*r)));
        let mut rot = ParameterBlock::rotation(self.extrinsics.rotation);
        let mut trans = ParameterBlock::vector3(&self.extrinsics.translation);
        let mut scale = ParameterBlock::scalar(self.scale);
        if fix_extrinsics {
            rot.fixed = true;
            trans.fixed = true;
        }
        if fix_extrinsics || self.options.scale_mode == ScaleMode::Fixed {
            scale.fixed = true;
        }
        blocks.push(rot);
        blocks.push(trans);
        blocks.push(scale);
        blocks
    }

    fn load_blocks(&mut self, blocks: &[ParameterBlock]) {
        let l = self.layout();
        for (i, p) in self.trajectory.translation.control_points_mut().iter_mut().enumerate() {
            *p = blocks[l.position(i)].vec3();
        }
        for (i, r) in self.trajectory.rotation.control_points_mut().iter_mut().enumerate() {
            *r = blocks[l.rotation(i)].rot();
        }
        self.extrinsics.rotation = blocks[l.extrinsic_rotation()].rot();
        self.extrinsics.translation = blocks[l.extrinsic_translation()].vec3();
        self.scale = blocks[l.scale()].scalar_value();
    }

    fn velocity_block(&self, m: &VelocityEstimate) -> Result<VelocityResidual, CalibrationError> {
        let cfg = *self.spline_config();
        let (i, u) = cfg.normalized_time(m.t)?;
        let basis = CumulativeBasis::new(cfg.order);
        let l = self.layout();
        let indices = cfg.window(i).map(|j| l.position(j)).chain(cfg.window(i).map(|j| l.rotation(j))).collect();
        Ok(VelocityResidual {
            order: cfg.order,
            dt: cfg.knot_spacing,
            lambda: basis.weights(u),
            dlambda: basis.weight_derivatives(u),
            measured: m.v,
            whiten: whitening(&self.options.velocity_noise.covariance(m))?,
            indices,
        })
    }

    fn pose_block(&self, m: &PoseMeasurement) -> Result<PoseResidual, CalibrationError> {
        let cfg = *self.spline_config();
        let (i, u) = cfg.normalized_time(m.t)?;
        let basis = CumulativeBasis::new(cfg.order);
        let l = self.layout();
        let mut indices: Vec<usize> = cfg.window(i).map(|j| l.position(j)).chain(cfg.window(i).map(|j| l.rotation(j))).collect();
        indices.extend([l.extrinsic_rotation(), l.extrinsic_translation(), l.scale()]);
        Ok(PoseResidual {
            order: cfg.order,
            lambda: basis.weights(u),
            measured: m.pose,
            whiten: whitening(&m.covariance)?,
            indices,
        })
    }

    fn residual_blocks(&self, include_velocity: bool) -> Result<Vec<Box<dyn ResidualBlock>>, CalibrationError> {
        let mut out: Vec<Box<dyn ResidualBlock>> = Vec::new();
        if include_velocity {
            for m in &self.velocity_measurements {
                out.push(Box::new(self.velocity_block(m)?));
            }
        }
        for m in &self.pose_measurements {
            out.push(Box::new(self.pose_block(m)?));
        }
        Ok(out)
    }

    /// Weighted cost `½Σ‖r‖²` over all whitened residuals at the current
    /// state.
    pub fn cost(&self) -> Result<f64, CalibrationError> {
        let residuals = self.residual_blocks(true)?;
        let refs: Vec<&dyn ResidualBlock> = residuals.iter().map(|b| b.as_ref()).collect();
        Ok(total_cost(&refs, &self.to_blocks(false))?)
    }

    /// Gauss-Newton covariance of the extrinsic tangent coordinates
    /// (rotation first) linearized at the current state.
    pub fn extrinsic_covariance(&self) -> Result<Matrix6<f64>, CalibrationError> {
        let residuals = self.residual_blocks(true)?;
        let refs: Vec<&dyn ResidualBlock> = residuals.iter().map(|b| b.as_ref()).collect();
        let l = self.layout();
        let c = marginal_covariance(&refs, &self.to_blocks(false), &[l.extrinsic_rotation(), l.extrinsic_translation()])?;
        Ok(Matrix6::from_fn(|i, j| c[(i, j)]))
    }

    /// Unwhitened velocity error `v_meas − R_wr(t)ᵀ·ṙ_wr(t)`.
    pub fn velocity_error(&self, m: &VelocityEstimate) -> Result<Vector3<f64>, CalibrationError> {
        let s = self.trajectory.sample(m.t)?;
        Ok(m.v - s.body_velocity)
    }

    /// Unwhitened pose error `[r_err; φ_err]`.
    pub fn pose_error(&self, m: &PoseMeasurement) -> Result<Vector6<f64>, CalibrationError> {
        let t_wr = self.trajectory.pose(m.t)?;
        Ok(pose_error(&m.pose, self.scale, &t_wr, &self.extrinsics.as_pose()))
    }
}

/// Parameter-block index layout: positions, rotations, then `R_cr`,
/// `r_c^{rc}` and the scale.
#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    n: usize,
}

impl BlockLayout {
    fn position(&self, i: usize) -> usize {
        i
    }
    fn rotation(&self, i: usize) -> usize {
        self.n + i
    }
    fn extrinsic_rotation(&self) -> usize {
        2 * self.n
    }
    fn extrinsic_translation(&self) -> usize {
        2 * self.n + 1
    }
    fn scale(&self) -> usize {
        2 * self.n + 2
    }
}

fn pose_error(t_cw: &Pose, scale: f64, t_wr: &Pose, t_cr: &Pose) -> Vector6<f64> {
    let scaled = Pose::new(t_cw.rotation, scale * t_cw.translation);
    let err = scaled.compose(t_wr).compose(&t_cr.inverse());
    let phi = log_so3(&err.rotation);
    Vector6::new(err.translation.x, err.translation.y, err.translation.z, phi.x, phi.y, phi.z)
}

struct VelocityResidual {
    order: usize,
    dt: f64,
    lambda: Vec<f64>,
    dlambda: Vec<f64>,
    measured: Vector3<f64>,
    whiten: Matrix3<f64>,
    indices: Vec<usize>,
}

impl ResidualBlock for VelocityResidual {
    fn num_residuals(&self) -> usize {
        3
    }

    fn parameter_indices(&self) -> &[usize] {
        &self.indices
    }

    fn evaluate(&self, p: &[&ParameterBlock]) -> DVector<f64> {
        let k = self.order;
        let pts: Vec<Vector3<f64>> = p[..k].iter().map(|b| b.vec3()).collect();
        let rots: Vec<Rotation3<f64>> = p[k..2 * k].iter().map(|b| b.rot()).collect();
        let (_, vel) = blend_translation(&pts, &self.lambda, &self.dlambda, self.dt);
        let (rot, _) = blend_rotation(&rots, &self.lambda, &self.dlambda, self.dt);
        let e = self.whiten * (self.measured - rot.inverse() * vel);
        DVector::from_column_slice(e.as_slice())
    }
}

struct PoseResidual {
    order: usize,
    lambda: Vec<f64>,
    measured: Pose,
    whiten: Matrix6<f64>,
    indices: Vec<usize>,
}

impl ResidualBlock for PoseResidual {
    fn num_residuals(&self) -> usize {
        6
    }

    fn parameter_indices(&self) -> &[usize] {
        &self.indices
    }

    fn evaluate(&self, p: &[&ParameterBlock]) -> DVector<f64> {
        let k = self.order;
        let pts: Vec<Vector3<f64>> = p[..k].iter().map(|b| b.vec3()).collect();
        let rots: Vec<Rotation3<f64>> = p[k..2 * k].iter().map(|b| b.rot()).collect();
        let zeros = vec![0.0; k];
        let (pos, _) = blend_translation(&pts, &self.lambda, &zeros, 1.0);
        let (rot, _) = blend_rotation(&rots, &self.lambda, &zeros, 1.0);
        let t_cr = Pose::new(p[2 * k].rot(), p[2 * k + 1].vec3());
        let scale = p[2 * k + 2].scalar_value();
        let e = self.whiten * pose_error(&self.measured, scale, &Pose::new(rot, pos), &t_cr);
        DVector::from_column_slice(e.as_slice())
    }
}

/// Whitened velocity residual of one measurement at the current state.
pub fn velocity_residual(problem: &CalibrationProblem, m: &VelocityEstimate) -> Result<Vector3<f64>, CalibrationError> {
    let w = whitening(&problem.options.velocity_noise.covariance(m))?;
    Ok(w * problem.velocity_error(m)?)
}

/// Whitened pose residual of one measurement at the current state.
pub fn pose_residual(problem: &CalibrationProblem, m: &PoseMeasurement) -> Result<Vector6<f64>, CalibrationError> {
    let w = whitening(&m.covariance)?;
    Ok(w * problem.pose_error(m)?)
}

/// Pose at `t` interpolated between the bracketing measurements
/// (linear in translation, geodesic in rotation), clamped at the ends.
fn interpolate_pose(sorted: &[(f64, Pose)], t: f64) -> Pose {
    let idx = sorted.partition_point(|(ts, _)| *ts <= t);
    if idx == 0 {
        return sorted[0].1;
    }
    if idx == sorted.len() {
        return sorted[sorted.len() - 1].1;
    }
    let (t0, a) = sorted[idx - 1];
    let (t1, b) = sorted[idx];
    let s = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    let dr = log_so3(&(a.rotation.inverse() * b.rotation));
    Pose::new(
        a.rotation * crate::geometry::exp_so3(&(s * dr)),
        a.translation + s * (b.translation - a.translation),
    )
}

const INIT_ALTERNATIONS: usize = 5;

/// Rotation `R` minimizing `Σ‖a_i − R·b_i‖²` (Kabsch). `None` when the
/// vectors do not span at least two directions.
fn align_vectors(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Option<Rotation3<f64>> {
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += x * y.transpose();
    }
    let sv = h.singular_values();
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|x, y| y.total_cmp(x));
    if !(sorted[0] > 0.0) || sorted[1] < 1e-6 * sorted[0] {
        return None;
    }
    Some(crate::geometry::so3::orthonormalize(&h))
}

/// Builds an initial state.
///
/// 1. Spline control points are seeded from the camera trajectory
///    `T_wc = T_cw⁻¹` with `T_cr = I` and refined by a pose-only fit.
/// 2. `R_cr` and `r_cr` are estimated from the rates of the fitted trajectory,
///    alternating a rotation alignment of radar and camera-frame velocities
///    with a linear solve for the lever arm. The lever arm stays zero when the
///    rotation rates do not span three axes.
/// 3. The spline is refit with these extrinsics.
///
/// The scale starts at 1.
pub fn initialize(problem: &CalibrationProblem, lm: &LmParams) -> Result<CalibrationProblem, CalibrationError> {
    if problem.pose_measurements.len() < 2 {
        return Err(CalibrationError::InsufficientData(format!(
            "{} pose measurements, at least 2 required",
            problem.pose_measurements.len()
        )));
    }
    let mut out = problem.clone();
    out.extrinsics = Extrinsics::identity();
    out.scale = 1.0;

    seed_and_fit(&mut out, lm)?;

    let mut cam_vel = Vec::new();
    let mut cam_rate = Vec::new();
    let mut radar_vel = Vec::new();
    for m in &out.velocity_measurements {
        let s = out.trajectory.sample(m.t)?;
        cam_vel.push(s.body_velocity);
        cam_rate.push(s.angular_velocity);
        radar_vel.push(m.v);
    }

    // Alternate between the rotation alignment and the linear lever-arm fit
    // `ω × r = R·v_r − v_c`.
    let mut rotation = None;
    let mut lever = Vector3::zeros();
    for _ in 0..INIT_ALTERNATIONS {
        let target: Vec<Vector3<f64>> = cam_vel.iter().zip(&cam_rate).map(|(v, w)| v + w.cross(&lever)).collect();
        let Some(r_cr) = align_vectors(&target, &radar_vel) else { break };
        rotation = Some(r_cr);
        let mut normal = Matrix3::zeros();
        let mut rhs = Vector3::zeros();
        for ((v, w), vr) in cam_vel.iter().zip(&cam_rate).zip(&radar_vel) {
            let s = skew(w);
            normal += s.transpose() * s;
            rhs += s.transpose() * (r_cr * vr - v);
        }
        let eig = normal.symmetric_eigenvalues();
        if !(eig.min() > 1e-6 * eig.max()) {
            lever = Vector3::zeros();
            break;
        }
        match normal.cholesky() {
            Some(c) => lever = c.solve(&rhs),
            None => break,
        }
    }
    match rotation {
        Some(r_cr) => {
            out.extrinsics = Extrinsics { rotation: r_cr, translation: lever };
            seed_and_fit(&mut out, lm)?;
        }
        None => log::warn!("radar velocities span fewer than two directions; keeping identity rotation"),
    }
    Ok(out)
}

/// Seeds the control points from the interpolated camera trajectory (mapped
/// through the current extrinsics) and refines them against the poses.
fn seed_and_fit(problem: &mut CalibrationProblem, lm: &LmParams) -> Result<SolveReport, CalibrationError> {
    let cfg = *problem.spline_config();
    let t_cr = problem.extrinsics.as_pose();
    let radar: Vec<(f64, Pose)> = problem
        .pose_measurements
        .iter()
        .map(|m| {
            let scaled = Pose::new(m.pose.rotation, problem.scale * m.pose.translation);
            (m.t, scaled.inverse().compose(&t_cr))
        })
        .collect();
    let shift = (cfg.order as f64 - 2.0) / 2.0;
    let seeds: Vec<Pose> = (0..cfg.num_control_points)
        .map(|j| interpolate_pose(&radar, cfg.t0 + (j as f64 - shift) * cfg.knot_spacing))
        .collect();
    problem.trajectory = TrajectorySpline::new(
        TranslationSpline::new(cfg, seeds.iter().map(|p| p.translation).collect())?,
        RotationSpline::new(cfg, seeds.iter().map(|p| p.rotation).collect())?,
    )?;
    fit_trajectory(problem, lm)
}

/// Least-squares spline fit to time-stamped poses `T_wr(t)`, each weighted
/// with `covariance`.
pub fn fit_spline_to_poses(
    poses: &[(f64, Pose)],
    order: usize,
    knot_spacing: f64,
    covariance: &Matrix6<f64>,
    lm: &LmParams,
) -> Result<TrajectorySpline, CalibrationError> {
    if poses.len() < 2 {
        return Err(CalibrationError::InsufficientData(format!("{} poses, at least 2 required", poses.len())));
    }
    let mut measurements: Vec<PoseMeasurement> = poses
        .iter()
        .map(|(t, p)| PoseMeasurement { t: *t, pose: p.inverse(), covariance: *covariance })
        .collect();
    measurements.sort_by(|a, b| a.t.total_cmp(&b.t));
    let config = SplineConfig::covering(order, knot_spacing, measurements[0].t, measurements[measurements.len() - 1].t)?;
    let mut problem = CalibrationProblem {
        velocity_measurements: Vec::new(),
        pose_measurements: measurements,
        trajectory: TrajectorySpline::constant(config, Pose::identity())?,
        extrinsics: Extrinsics::identity(),
        scale: 1.0,
        options: ProblemOptions { spline_order: order, knot_spacing, ..ProblemOptions::default() },
    };
    seed_and_fit(&mut problem, lm)?;
    Ok(problem.trajectory)
}

/// Builds, initializes and solves a problem in one call. Returns the
/// initialized problem alongside the solution.
pub fn calibrate(
    velocities: Vec<VelocityEstimate>,
    poses: Vec<PoseMeasurement>,
    options: ProblemOptions,
    lm: &LmParams,
) -> Result<(CalibrationProblem, CalibrationSolution), CalibrationError> {
    let problem = CalibrationProblem::new(velocities, poses, options)?;
    let initial = initialize(&problem, lm)?;
    let solution = solve_calibration(&initial, lm)?;
    Ok((initial, solution))
}

/// Pose-only refinement of the trajectory with extrinsics held fixed.
fn fit_trajectory(problem: &mut CalibrationProblem, lm: &LmParams) -> Result<SolveReport, CalibrationError> {
    let residuals = problem.residual_blocks(false)?;
    let refs: Vec<&dyn ResidualBlock> = residuals.iter().map(|b| b.as_ref()).collect();
    let (blocks, report) = lm_minimize(&refs, problem.to_blocks(true), lm)?;
    problem.load_blocks(&blocks);
    Ok(report)
}

/// Extrinsic estimate, trajectory and diagnostics of one calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSolution {
    pub extrinsics: Extrinsics,
    pub scale: f64,
    pub trajectory: TrajectorySpline,
    pub report: SolveReport,
    pub stats: ResidualStats,
    /// Gauss-Newton covariance of `(R_cr, r_c^{rc})` tangent coordinates,
    /// rotation first, when the information matrix is invertible.
    pub extrinsic_covariance: Option<Matrix6<f64>>,
    pub scale_variance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidualStats {
    /// RMS of the unwhitened velocity error, m/s.
    pub rms_velocity: f64,
    /// RMS of the unwhitened pose translation error, m.
    pub rms_pose_translation: f64,
    /// RMS of the unwhitened pose rotation error, rad.
    pub rms_pose_rotation: f64,
    /// Standard deviation of all whitened residuals.
    pub whitened_std: f64,
    pub num_residuals: usize,
}

fn residual_stats(problem: &CalibrationProblem) -> Result<ResidualStats, CalibrationError> {
    let mut sv = 0.0;
    let mut whitened = Vec::new();
    for m in &problem.velocity_measurements {
        sv += problem.velocity_error(m)?.norm_squared();
        whitened.extend(velocity_residual(problem, m)?.iter().copied());
    }
    let (mut st, mut sr) = (0.0, 0.0);
    for m in &problem.pose_measurements {
        let e = problem.pose_error(m)?;
        st += e.fixed_rows::<3>(0).norm_squared();
        sr += e.fixed_rows::<3>(3).norm_squared();
        whitened.extend(pose_residual(problem, m)?.iter().copied());
    }
    let nv = problem.velocity_measurements.len().max(1) as f64;
    let np = problem.pose_measurements.len().max(1) as f64;
    let n = whitened.len() as f64;
    let mean = whitened.iter().sum::<f64>() / n;
    let var = whitened.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(ResidualStats {
        rms_velocity: (sv / (3.0 * nv)).sqrt(),
        rms_pose_translation: (st / (3.0 * np)).sqrt(),
        rms_pose_rotation: (sr / (3.0 * np)).sqrt(),
        whitened_std: var.sqrt(),
        num_residuals: whitened.len(),
    })
}

/// Jointly refines the trajectory, extrinsics and (optionally) the scale.
pub fn solve_calibration(problem: &CalibrationProblem, lm: &LmParams) -> Result<CalibrationSolution, CalibrationError> {
    let residuals = problem.residual_blocks(true)?;
    let refs: Vec<&dyn ResidualBlock> = residuals.iter().map(|b| b.as_ref()).collect();
    let (blocks, report) = lm_minimize(&refs, problem.to_blocks(false), lm)?;
    let mut solved = problem.clone();
    solved.load_blocks(&blocks);

    let l = solved.layout();
    let extrinsic_covariance = marginal_covariance(&refs, &blocks, &[l.extrinsic_rotation(), l.extrinsic_translation()])
        .ok()
        .map(|c| Matrix6::from_fn(|i, j| c[(i, j)]));
    let scale_variance = if solved.options.scale_mode == ScaleMode::Estimated {
        marginal_covariance(&refs, &blocks, &[l.scale()]).ok().map(|c| c[(0, 0)])
    } else {
        None
    };

    Ok(CalibrationSolution {
        extrinsics: solved.extrinsics,
        scale: solved.scale,
        stats: residual_stats(&solved)?,
        trajectory: solved.trajectory,
        report,
        extrinsic_covariance,
        scale_variance,
    })
}

/// Distance (m) between a target's reference world position and its
/// radar-frame observation mapped through `T_cr` and the camera pose
/// `T_cw` into the world frame.
pub fn reprojection_error(extrinsics: &Extrinsics, target_world: &Vector3<f64>, target_radar: &Vector3<f64>, camera_pose: &Pose) -> f64 {
    let in_camera = extrinsics.as_pose().transform_point(target_radar);
    let in_world = camera_pose.inverse().transform_point(&in_camera);
    (in_world - target_world).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;

    fn velocity(t: f64, v: Vector3<f64>) -> VelocityEstimate {
        VelocityEstimate { t, v, covariance: Matrix3::identity() * 0.01, inlier_count: 10, total_count: 10 }
    }

    fn problem_with(traj: TrajectorySpline, extr: Extrinsics, vels: Vec<VelocityEstimate>) -> CalibrationProblem {
        let cfg = *traj.config();
        let poses: Vec<PoseMeasurement> = (0..10)
            .map(|i| {
                let t = cfg.start() + 0.05 + i as f64 * (cfg.end() - cfg.start() - 0.1) / 9.0;
                let t_wr = traj.pose(t).unwrap();
                PoseMeasurement::new(t, extr.as_pose().compose(&t_wr.inverse()))
            })
            .collect();
        let mut p = CalibrationProblem::new(vels, poses, ProblemOptions::default()).unwrap();
        // Reuse the given trajectory, including its knot layout.
        p.trajectory = traj;
        p.extrinsics = extr;
        p
    }

    #[test]
    fn static_spline_zero_velocity_residual() {
        let cfg = SplineConfig::new(4, 0.1, 0.0, 12).unwrap();
        let traj = TrajectorySpline::constant(cfg, Pose::new(exp_so3(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(1.0, 2.0, 3.0))).unwrap();
        let p = problem_with(traj, Extrinsics::identity(), vec![velocity(0.4, Vector3::zeros())]);
        assert_relative_eq!(velocity_residual(&p, &p.velocity_measurements[0]).unwrap(), Vector3::zeros());
    }

    #[test]
    fn linear_spline_matches_world_velocity() {
        let c = Vector3::new(0.5, -0.2, 0.1);
        let cfg = SplineConfig::new(4, 0.1, 0.0, 12).unwrap();
        let traj = TrajectorySpline::new(
            TranslationSpline::new(cfg, (0..12).map(|i| c * 0.1 * i as f64).collect()).unwrap(),
            RotationSpline::constant(cfg, Rotation3::identity()).unwrap(),
        )
        .unwrap();
        let m = velocity(0.43, c);
        let p = problem_with(traj, Extrinsics::identity(), vec![m]);
        assert!(velocity_residual(&p, &m).unwrap().norm() < 1e-12);

        let delta = Vector3::new(0.01, -0.03, 0.2);
        let shifted = velocity(0.43, c + delta);
        assert_relative_eq!(p.velocity_error(&shifted).unwrap(), delta, epsilon = 1e-12);
    }

    #[test]
    fn pose_residual_examples() {
        let cfg = SplineConfig::new(4, 0.1, 0.0, 12).unwrap();
        let traj = TrajectorySpline::constant(cfg, Pose::new(exp_so3(&Vector3::new(0.3, -0.1, 0.2)), Vector3::new(0.5, 0.1, -0.4))).unwrap();
        let extr = Extrinsics { rotation: exp_so3(&Vector3::new(-1.2, 0.3, 0.8)), translation: Vector3::new(0.1, -0.05, 0.02) };
        let p = problem_with(traj.clone(), extr, vec![velocity(0.4, Vector3::zeros())]);
        for m in &p.pose_measurements {
            assert!(pose_residual(&p, m).unwrap().norm() < 1e-9);
        }

        // Pure translation offset with identity rotations.
        let traj = TrajectorySpline::constant(cfg, Pose::identity()).unwrap();
        let mut p = problem_with(traj, Extrinsics::identity(), vec![velocity(0.4, Vector3::zeros())]);
        let d = Vector3::new(0.02, -0.01, 0.03);
        let m = PoseMeasurement::new(0.5, Pose::from_translation(d));
        let e = p.pose_error(&m).unwrap();
        assert_relative_eq!(Vector3::new(e[0], e[1], e[2]), d, epsilon = 1e-15);
        assert_relative_eq!(Vector3::new(e[3], e[4], e[5]), Vector3::zeros());

        // Doubling the scale on a halved measurement reproduces the residual.
        let full = PoseMeasurement::new(0.5, Pose::new(exp_so3(&Vector3::new(0.1, 0.0, 0.2)), Vector3::new(0.4, 0.2, -0.6)));
        let e1 = p.pose_error(&full).unwrap();
        let mut halved = full;
        halved.pose.translation *= 0.5;
        p.scale = 2.0;
        let e2 = p.pose_error(&halved).unwrap();
        assert_relative_eq!(e1, e2, epsilon = 1e-15);
    }

    #[test]
    fn out_of_domain_residual() {
        let cfg = SplineConfig::new(4, 0.1, 0.0, 12).unwrap();
        let traj = TrajectorySpline::constant(cfg, Pose::identity()).unwrap();
        let p = problem_with(traj, Extrinsics::identity(), vec![velocity(0.4, Vector3::zeros())]);
        assert!(matches!(velocity_residual(&p, &velocity(100.0, Vector3::zeros())), Err(CalibrationError::Domain(_))));
        assert!(matches!(
            pose_residual(&p, &PoseMeasurement::new(-3.0, Pose::identity())),
            Err(CalibrationError::Domain(_))
        ));
    }

    #[test]
    fn whitening_realizes_inverse_covariance() {
        let a = Matrix3::new(2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5);
        let w = whitening(&a).unwrap();
        assert_relative_eq!(w.transpose() * w, a.try_inverse().unwrap(), epsilon = 1e-12);
        assert!(whitening(&Matrix3::<f64>::zeros()).is_err());
    }

    #[test]
    fn insufficient_pose_data() {
        let err = CalibrationProblem::new(
            vec![velocity(0.0, Vector3::zeros())],
            vec![PoseMeasurement::new(0.0, Pose::identity())],
            ProblemOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CalibrationError::InsufficientData(_)));
    }

    #[test]
    fn reprojection_examples() {
        let extr = Extrinsics { rotation: exp_so3(&Vector3::new(0.2, -0.4, 1.0)), translation: Vector3::new(0.1, 0.2, -0.3) };
        let t_cw = Pose::new(exp_so3(&Vector3::new(-0.3, 0.1, 0.2)), Vector3::new(1.0, -2.0, 0.5));
        let target_radar = Vector3::new(4.0, 0.5, -0.2);
        let target_world = t_cw.inverse().transform_point(&extr.as_pose().transform_point(&target_radar));
        assert!(reprojection_error(&extr, &target_world, &target_radar, &t_cw) < 1e-12);

        let identity = Extrinsics::identity();
        let shifted = Extrinsics { rotation: Rotation3::identity(), translation: Vector3::new(0.01, 0.0, 0.0) };
        let p = Vector3::new(3.0, 1.0, 2.0);
        let err = reprojection_error(&shifted, &p, &p, &Pose::identity());
        assert_relative_eq!(err, 0.01, epsilon = 1e-15);
        assert_eq!(reprojection_error(&identity, &p, &p, &Pose::identity()), 0.0);
    }

    #[test]
    fn kabsch_recovers_rotation() {
        let r = exp_so3(&Vector3::new(1.0, -2.0, 0.5));
        let b = vec![Vector3::x(), Vector3::y(), Vector3::new(0.3, 0.2, 1.0)];
        let a: Vec<_> = b.iter().map(|v| r * v).collect();
        let est = align_vectors(&a, &b).unwrap();
        assert!(crate::geometry::so3::angle_between(&est, &r) < 1e-12);
        assert!(align_vectors(&[Vector3::x(), Vector3::x() * 2.0], &[Vector3::y(), Vector3::y()]).is_none());
    }
}
