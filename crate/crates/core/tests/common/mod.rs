#![allow(dead_code)]

use nalgebra::{Matrix3, Vector3};
use radcal::calibration::{Extrinsics, PoseMeasurement};
use radcal::geometry::{exp_so3, Pose, RotationSpline, SplineConfig, TrajectorySpline, TranslationSpline};
use radcal::radar::VelocityEstimate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
}

pub fn random_extrinsics(rng: &mut impl Rng) -> Extrinsics {
    Extrinsics { rotation: exp_so3(&random_vec(rng, 2.0)), translation: random_vec(rng, 0.3) }
}

/// Smooth random radar trajectory laid out exactly like the spline a
/// problem builds for poses spanning `[0, duration]`.
pub fn random_spline(rng: &mut impl Rng, duration: f64, spacing: f64) -> TrajectorySpline {
    let cfg = SplineConfig::covering(4, spacing, 0.0, duration).unwrap();
    let n = cfg.num_control_points;
    let mut p = Vector3::zeros();
    let mut r = exp_so3(&random_vec(rng, 1.0));
    let mut pts = Vec::with_capacity(n);
    let mut rots = Vec::with_capacity(n);
    let mut drift = random_vec(rng, 0.05);
    let mut spin = random_vec(rng, 0.05);
    for _ in 0..n {
        drift = 0.8 * drift + random_vec(rng, 0.03);
        spin = 0.8 * spin + random_vec(rng, 0.04);
        p += drift;
        r = exp_so3(&spin) * r;
        pts.push(p);
        rots.push(r);
    }
    TrajectorySpline::new(TranslationSpline::new(cfg, pts).unwrap(), RotationSpline::new(cfg, rots).unwrap()).unwrap()
}

/// Noiseless measurements of a spline trajectory `T_wr` seen through
/// extrinsics `T_cr`.
pub fn spline_measurements(
    traj: &TrajectorySpline,
    extr: &Extrinsics,
    duration: f64,
    camera_rate: f64,
    radar_rate: f64,
) -> (Vec<VelocityEstimate>, Vec<PoseMeasurement>) {
    let n_cam = (duration * camera_rate).round() as usize;
    let poses = (0..=n_cam)
        .map(|j| {
            let t = j as f64 / camera_rate;
            let t_wr = traj.pose(t).unwrap();
            PoseMeasurement::new(t, extr.as_pose().compose(&t_wr.inverse()))
        })
        .collect();
    let n_rad = (duration * radar_rate).floor() as usize;
    let vels = (0..n_rad)
        .map(|i| {
            let t = 0.017 + i as f64 / radar_rate;
            VelocityEstimate {
                t,
                v: traj.sample(t).unwrap().body_velocity,
                covariance: Matrix3::from_diagonal(&Vector3::new(0.03f64.powi(2), 0.06f64.powi(2), 0.1f64.powi(2))),
                inlier_count: 0,
                total_count: 0,
            }
        })
        .collect();
    (vels, poses)
}

pub fn transform_world(poses: &[PoseMeasurement], g: &Pose) -> Vec<PoseMeasurement> {
    let g_inv = g.inverse();
    poses.iter().map(|m| PoseMeasurement { pose: m.pose.compose(&g_inv), ..*m }).collect()
}
