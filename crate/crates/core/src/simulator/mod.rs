//! Synthetic radar and camera data from a known trajectory and extrinsics.
//!
//! The radar moves along `T_wr(t) = T_wr0·(exp(θ(t)), d(t))` where each
//! component of `θ` and `d` is a sinusoid with its own amplitude, frequency
//! and phase. The camera starts at `T_wc0 = (I, (0, 0, −standoff))` facing a
//! checkerboard in the world `z = 0` plane, and `T_wr0 = T_wc0·T_cr`.

pub mod camera;
pub mod monte_carlo;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, Rotation3, Vector3, Vector6};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_spline_to_poses, CalibrationError, Extrinsics, PoseMeasurement};
use crate::geometry::{exp_so3, log_so3, right_jacobian, Pose, TrajectorySpline};
use crate::optimizer::LmParams;
use crate::radar::{mlesac_velocity, MlesacParams, RadarDetection, VelocityEstimate};

pub use camera::{project_points, solve_pnp, CameraError, Checkerboard, PinholeCamera};

/// Pixel sigma used for the reported pose covariance when the configured
/// pixel noise is zero.
pub const MIN_COVARIANCE_PIXEL_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryParams {
    /// Per-axis translation amplitude (m).
    pub translation_amplitude: Vector3<f64>,
    /// Per-axis translation frequency (Hz).
    pub translation_frequency: Vector3<f64>,
    pub translation_phase: Vector3<f64>,
    /// Per-axis rotation-vector amplitude (rad).
    pub rotation_amplitude: Vector3<f64>,
    pub rotation_frequency: Vector3<f64>,
    pub rotation_phase: Vector3<f64>,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            translation_amplitude: Vector3::new(0.3, 0.3, 0.25),
            translation_frequency: Vector3::new(0.23, 0.31, 0.17),
            translation_phase: Vector3::new(0.3, 1.9, 4.1),
            rotation_amplitude: Vector3::new(0.2, 0.22, 0.2),
            rotation_frequency: Vector3::new(0.19, 0.27, 0.35),
            rotation_phase: Vector3::new(2.6, 0.7, 5.3),
        }
    }
}

impl TrajectoryParams {
    pub fn still() -> Self {
        Self {
            translation_amplitude: Vector3::zeros(),
            rotation_amplitude: Vector3::zeros(),
            ..Self::default()
        }
    }
}

/// `(a·sin(2πft + φ), a·2πf·cos(2πft + φ))` per component.
fn sinusoid(a: &Vector3<f64>, f: &Vector3<f64>, phase: &Vector3<f64>, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let mut x = Vector3::zeros();
    let mut dx = Vector3::zeros();
    for i in 0..3 {
        let w = 2.0 * PI * f[i];
        let arg = w * t + phase[i];
        x[i] = a[i] * arg.sin();
        dx[i] = a[i] * w * arg.cos();
    }
    (x, dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Synthesize detections and leave velocity estimation to the caller.
    #[default]
    Scans,
    /// Emit noisy ego-velocities directly.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadarSimParams {
    pub mode: VelocityMode,
    /// Range-rate noise per detection (m/s), scan mode.
    pub range_rate_sigma: f64,
    /// Per-axis ego-velocity noise (m/s), direct mode.
    pub velocity_sigma: Vector3<f64>,
    pub outlier_fraction: f64,
    pub detections_per_scan: usize,
    pub num_scatterers: usize,
    pub min_range: f64,
    pub max_range: f64,
    /// Half field of view in azimuth (rad).
    pub azimuth_fov: f64,
    /// Half field of view in elevation (rad).
    pub elevation_fov: f64,
}

impl Default for RadarSimParams {
    fn default() -> Self {
        Self {
            mode: VelocityMode::Scans,
            range_rate_sigma: 0.0,
            velocity_sigma: Vector3::new(0.03, 0.06, 0.1),
            outlier_fraction: 0.0,
            detections_per_scan: 64,
            num_scatterers: 4000,
            min_range: 1.0,
            max_range: 20.0,
            azimuth_fov: 70f64.to_radians(),
            elevation_fov: 30f64.to_radians(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseMode {
    /// Project target corners, add pixel noise and solve for the pose.
    #[default]
    Pnp,
    /// Perturb the true pose directly in its tangent space.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSimParams {
    pub mode: PoseMode,
    pub intrinsics: PinholeCamera,
    pub board: Checkerboard,
    /// Pixel noise standard deviation (px).
    pub pixel_noise: f64,
    /// Direct-mode translation noise (m).
    pub translation_sigma: f64,
    /// Direct-mode rotation noise (rad).
    pub rotation_sigma: f64,
    /// Distance from the initial camera position to the board (m).
    pub standoff: f64,
}

impl Default for CameraSimParams {
    fn default() -> Self {
        Self {
            mode: PoseMode::Pnp,
            intrinsics: PinholeCamera::default(),
            board: Checkerboard::default(),
            pixel_noise: 0.0,
            translation_sigma: 0.002,
            rotation_sigma: 0.1f64.to_radians(),
            standoff: 2.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub duration: f64,
    pub radar_rate: f64,
    pub camera_rate: f64,
    /// Time of the first radar scan (s).
    pub radar_start: f64,
    pub trajectory: TrajectoryParams,
    pub radar: RadarSimParams,
    pub camera: CameraSimParams,
    /// Rotation vector of the true `R_cr`.
    pub extrinsic_rotation: Vector3<f64>,
    /// True `r_c^{rc}` (m).
    pub extrinsic_translation: Vector3<f64>,
    pub seed: u64,
}

/// A forward-looking radar mounted with its x axis along the camera's
/// optical axis, with a small extra misalignment.
pub fn default_extrinsic_rotation() -> Rotation3<f64> {
    #[rustfmt::skip]
    let base = Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, -1.0, 0.0,
        0.0, 0.0, -1.0,
        1.0, 0.0, 0.0,
    ));
    base * exp_so3(&Vector3::new(0.03, -0.05, 0.02))
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 12.0,
            radar_rate: 10.0,
            camera_rate: 30.0,
            radar_start: 0.013,
            trajectory: TrajectoryParams::default(),
            radar: RadarSimParams::default(),
            camera: CameraSimParams::default(),
            extrinsic_rotation: log_so3(&default_extrinsic_rotation()),
            extrinsic_translation: Vector3::new(0.12, -0.08, 0.05),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if !(self.radar_rate > 0.0 && self.camera_rate > 0.0) {
            return bad("rates must be positive");
        }
        if !(0.0..1.0).contains(&self.radar.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 1)");
        }
        if self.radar.range_rate_sigma < 0.0 || self.radar.velocity_sigma.iter().any(|s| *s < 0.0) {
            return bad("radar noise must be nonnegative");
        }
        if self.camera.pixel_noise < 0.0 || self.camera.translation_sigma < 0.0 || self.camera.rotation_sigma < 0.0 {
            return bad("camera noise must be nonnegative");
        }
        if !(self.radar.min_range > 0.0 && self.radar.max_range > self.radar.min_range) {
            return bad("radar range limits are invalid");
        }
        if self.radar.detections_per_scan < 3 {
            return bad("at least three detections per scan are required");
        }
        Ok(())
    }

    pub fn extrinsics(&self) -> Extrinsics {
        Extrinsics { rotation: exp_so3(&self.extrinsic_rotation), translation: self.extrinsic_translation }
    }

    pub fn initial_camera_pose(&self) -> Pose {
        Pose::from_translation(Vector3::new(0.0, 0.0, -self.camera.standoff))
    }

    /// `T_wr` at `t = 0` offset: the pose the sinusoids are applied to.
    pub fn base_radar_pose(&self) -> Pose {
        self.initial_camera_pose().compose(&self.extrinsics().as_pose())
    }

    pub fn camera_times(&self) -> Vec<f64> {
        let n = (self.duration * self.camera_rate + 1e-9).floor() as usize;
        (0..=n).map(|j| j as f64 / self.camera_rate).collect()
    }

    /// Radar scan times inside the camera time span.
    pub fn radar_times(&self) -> Vec<f64> {
        let last = self.camera_times().last().copied().unwrap_or(0.0);
        (0..)
            .map(|i| self.radar_start + i as f64 / self.radar_rate)
            .take_while(|t| *t <= last)
            .filter(|t| *t >= 0.0)
            .collect()
    }
}

/// Pose, radar-frame velocity and radar-frame angular velocity at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSample {
    pub t: f64,
    /// `T_wr`.
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

/// Closed-form radar trajectory and body-frame rates.
pub fn generate_trajectory(config: &SimConfig, t: f64) -> TruthSample {
    let p = &config.trajectory;
    let (theta, dtheta) = sinusoid(&p.rotation_amplitude, &p.rotation_frequency, &p.rotation_phase, t);
    let (d, dd) = sinusoid(&p.translation_amplitude, &p.translation_frequency, &p.translation_phase, t);
    let rot = exp_so3(&theta);
    let pose = config.base_radar_pose().compose(&Pose::new(rot, d));
    TruthSample { t, pose, velocity: rot.inverse() * dd, angular_velocity: right_jacobian(&theta) * dtheta }
}

/// True camera pose `T_cw = T_cr·T_wr⁻¹` at `t`.
pub fn true_camera_pose(config: &SimConfig, t: f64) -> Pose {
    config.extrinsics().as_pose().compose(&generate_trajectory(config, t).pose.inverse())
}

/// Static scatterers on a spherical shell around the start of the
/// trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scatterers: Vec<Vector3<f64>>,
}

impl Scene {
    pub fn generate<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Self {
        let centre = config.base_radar_pose().translation;
        let inner = config.radar.min_range.max(4.0);
        let outer = config.radar.max_range.min(15.0).max(inner + 1.0);
        let scatterers = (0..config.radar.num_scatterers)
            .map(|_| {
                let dir = Vector3::new(
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                )
                .normalize();
                centre + dir * rng.random_range(inner..outer)
            })
            .collect();
        Self { scatterers }
    }
}

/// One synthesized scan and the indices of its corrupted detections.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan {
    pub detections: Vec<RadarDetection>,
    pub outliers: Vec<usize>,
}

/// Detections of the visible scatterers at time `t`, with range-rate noise
/// and outliers. All detections share the scan timestamp.
pub fn simulate_radar_scan<R: Rng + ?Sized>(config: &SimConfig, scene: &Scene, t: f64, rng: &mut R) -> SimulatedScan {
    let truth = generate_trajectory(config, t);
    let inv = truth.pose.inverse();
    let rp = &config.radar;
    let visible: Vec<Vector3<f64>> = scene
        .scatterers
        .iter()
        .map(|p| inv.transform_point(p))
        .filter(|p| {
            let range = p.norm();
            let az = p.y.atan2(p.x);
            let el = (p.z / range).asin();
            range >= rp.min_range && range <= rp.max_range && az.abs() <= rp.azimuth_fov && el.abs() <= rp.elevation_fov
        })
        .collect();
    let n = visible.len().min(rp.detections_per_scan);
    let chosen = sample_indices(rng, visible.len(), n).into_vec();
    let mut detections: Vec<RadarDetection> = chosen
        .iter()
        .map(|&i| {
            let p = visible[i];
            let u = p.normalize();
            let noise: f64 = StandardNormal.sample(rng);
            let rr = -u.dot(&truth.velocity) + rp.range_rate_sigma * noise;
            RadarDetection::from_direction(t, p.norm(), &p, rr, rng.random_range(10.0..40.0))
        })
        .collect();
    let num_outliers = (rp.outlier_fraction * n as f64).round() as usize;
    let mut outliers = sample_indices(rng, n, num_outliers).into_vec();
    outliers.sort_unstable();
    for &i in &outliers {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        detections[i].range_rate += sign * rng.random_range(1.0..4.0);
    }
    SimulatedScan { detections, outliers }
}

/// Noisy ego-velocity at `t` with its diagonal covariance.
pub fn simulate_direct_velocity<R: Rng + ?Sized>(config: &SimConfig, t: f64, rng: &mut R) -> VelocityEstimate {
    let truth = generate_trajectory(config, t);
    let s = config.radar.velocity_sigma;
    let z = Vector3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
    VelocityEstimate {
        t,
        v: truth.velocity + s.component_mul(&z),
        covariance: Matrix3::from_diagonal(&s.component_mul(&s)),
        inlier_count: 0,
        total_count: 0,
    }
}

/// Camera pose measurement at `t`, from noisy target corners (PnP mode) or
/// a tangent-space perturbation of the true pose (direct mode).
pub fn simulate_camera_measurement<R: Rng + ?Sized>(config: &SimConfig, t: f64, rng: &mut R) -> Result<PoseMeasurement, CameraError> {
    let truth = true_camera_pose(config, t);
    let cp = &config.camera;
    match cp.mode {
        PoseMode::Pnp => {
            let corners = cp.board.corners();
            let clean = project_points(&cp.intrinsics, &corners, &truth)?;
            let noisy: Vec<_> = clean
                .iter()
                .map(|px| {
                    let (a, b): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
                    px + nalgebra::Vector2::new(a, b) * cp.pixel_noise
                })
                .collect();
            let sigma = cp.pixel_noise.max(MIN_COVARIANCE_PIXEL_SIGMA);
            let (pose, covariance) = solve_pnp(&cp.intrinsics, &corners, &noisy, sigma, &LmParams::default())?;
            Ok(PoseMeasurement { t, pose, covariance })
        }
        PoseMode::Direct => {
            let sd = Vector6::new(
                cp.translation_sigma,
                cp.translation_sigma,
                cp.translation_sigma,
                cp.rotation_sigma,
                cp.rotation_sigma,
                cp.rotation_sigma,
            );
            let z = Vector6::from_fn(|_, _| StandardNormal.sample(rng));
            let pose = truth.boxplus(&sd.component_mul(&z));
            let floor = Vector6::new(1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4);
            let var = sd.component_mul(&sd).sup(&floor.component_mul(&floor));
            Ok(PoseMeasurement { t, pose, covariance: Matrix6::from_diagonal(&var) })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub extrinsics: Extrinsics,
    /// True radar state at every radar scan time.
    pub radar_samples: Vec<TruthSample>,
    /// True `T_cw` at every camera time, including dropped frames.
    pub camera_poses: Vec<(f64, Pose)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SimConfig,
    /// Scan mode only.
    pub radar_scans: Vec<Vec<RadarDetection>>,
    pub outlier_indices: Vec<Vec<usize>>,
    /// Direct mode only.
    pub direct_velocities: Vec<VelocityEstimate>,
    pub pose_measurements: Vec<PoseMeasurement>,
    pub truth: GroundTruth,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a full dataset. Scene, radar and camera noise come from
/// separate streams of the seeded generator so changing one noise level
/// leaves the other draws unchanged.
pub fn simulate_dataset(config: &SimConfig) -> Result<SyntheticDataset, SimError> {
    config.validate()?;
    let mut scene_rng = stream_rng(config.seed, 0);
    let mut radar_rng = stream_rng(config.seed, 1);
    let mut camera_rng = stream_rng(config.seed, 2);

    let radar_times = config.radar_times();
    let mut radar_scans = Vec::new();
    let mut outlier_indices = Vec::new();
    let mut direct_velocities = Vec::new();
    match config.radar.mode {
        VelocityMode::Scans => {
            let scene = Scene::generate(config, &mut scene_rng);
            for &t in &radar_times {
                let scan = simulate_radar_scan(config, &scene, t, &mut radar_rng);
                radar_scans.push(scan.detections);
                outlier_indices.push(scan.outliers);
            }
        }
        VelocityMode::Direct => {
            direct_velocities = radar_times.iter().map(|&t| simulate_direct_velocity(config, t, &mut radar_rng)).collect();
        }
    }

    let mut pose_measurements = Vec::new();
    let mut camera_poses = Vec::new();
    for t in config.camera_times() {
        camera_poses.push((t, true_camera_pose(config, t)));
        match simulate_camera_measurement(config, t, &mut camera_rng) {
            Ok(m) => pose_measurements.push(m),
            Err(e) => log::debug!("dropping camera frame at t={t}: {e}"),
        }
    }

    Ok(SyntheticDataset {
        config: *config,
        radar_scans,
        outlier_indices,
        direct_velocities,
        pose_measurements,
        truth: GroundTruth {
            extrinsics: config.extrinsics(),
            radar_samples: radar_times.iter().map(|&t| generate_trajectory(config, t)).collect(),
            camera_poses,
        },
    })
}

impl SyntheticDataset {
    /// Ego-velocity per scan: the stored values in direct mode, otherwise
    /// MLESAC on each scan with a generator seeded per scan index. Failed
    /// scans are skipped.
    pub fn velocity_estimates(&self, params: &MlesacParams, seed: u64) -> Vec<VelocityEstimate> {
        if self.config.radar.mode == VelocityMode::Direct {
            return self.direct_velocities.clone();
        }
        self.radar_scans
            .iter()
            .enumerate()
            .filter_map(|(i, scan)| {
                let mut rng = stream_rng(seed, i as u64);
                match mlesac_velocity(scan, params, &mut rng) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        log::debug!("scan {i} skipped: {e}");
                        None
                    }
                }
            })
            .collect()
    }

    /// Least-squares spline fit to the true radar trajectory, sampled at the
    /// camera times.
    pub fn truth_spline(&self, order: usize, knot_spacing: f64) -> Result<TrajectorySpline, SimError> {
        let poses: Vec<(f64, Pose)> =
            self.config.camera_times().iter().map(|&t| (t, generate_trajectory(&self.config, t).pose)).collect();
        let cov = Matrix6::identity() * 1e-6;
        Ok(fit_spline_to_poses(&poses, order, knot_spacing, &cov, &LmParams::default())?)
    }
}
