mod common;

use common::*;
use nalgebra::Vector3;
use proptest::prelude::*;
use radcal::calibration::*;
use radcal::geometry::{exp_so3, Pose};
use radcal::optimizer::LmParams;
use radcal::radar::MlesacParams;
use radcal::simulator::{simulate_dataset, SimConfig, VelocityMode};

fn lm() -> LmParams {
    LmParams::default()
}

#[test]
fn spline_generated_data_is_a_global_minimum() {
    let mut rng = rng(10);
    for _ in 0..3 {
        let traj = random_spline(&mut rng, 6.0, 0.1);
        let extr = random_extrinsics(&mut rng);
        let (vels, poses) = spline_measurements(&traj, &extr, 6.0, 20.0, 10.0);
        let (initial, sol) = calibrate(vels, poses, ProblemOptions::default(), &lm()).unwrap();
        assert!(sol.report.final_cost < 1e-12 * sol.report.initial_cost, "{:?}", sol.report);
        assert!(initial.cost().unwrap() > 0.0);
        let (dt, dr) = sol.extrinsics.error_to(&extr);
        assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
    }
}

#[test]
fn initialization_fits_identity_extrinsic_data() {
    let mut rng = rng(11);
    let traj = random_spline(&mut rng, 5.0, 0.1);
    let (vels, poses) = spline_measurements(&traj, &Extrinsics::identity(), 5.0, 20.0, 10.0);
    let problem = CalibrationProblem::new(vels, poses, ProblemOptions::default()).unwrap();
    let init = initialize(&problem, &lm()).unwrap();
    for m in &init.pose_measurements {
        assert!(init.pose_error(m).unwrap().norm() < 1e-7);
    }
    for s in 0..50 {
        let t = 0.1 * s as f64;
        assert!(init.trajectory.pose(t).unwrap().distance(&traj.pose(t).unwrap()).0 < 1e-7);
    }
}

#[test]
fn initialization_residuals_below_noise() {
    let mut cfg = SimConfig { seed: 5, ..SimConfig::default() };
    cfg.camera.pixel_noise = 1.0;
    cfg.radar.range_rate_sigma = 0.05;
    let ds = simulate_dataset(&cfg).unwrap();
    let vels = ds.velocity_estimates(&MlesacParams::default(), 5);
    let problem = CalibrationProblem::new(vels, ds.pose_measurements, ProblemOptions::default()).unwrap();
    let init = initialize(&problem, &lm()).unwrap();
    let (mut sum, mut n) = (0.0, 0);
    for m in &init.pose_measurements {
        sum += pose_residual(&init, m).unwrap().norm_squared();
        n += 6;
    }
    let rms = (sum / n as f64).sqrt();
    assert!(rms < 1.0, "whitened pose rms after initialization {rms}");
    // Rotation alignment lands within a few degrees of the truth.
    let (_, dr) = init.extrinsics.error_to(&ds.truth.extrinsics);
    assert!(dr.to_degrees() < 5.0, "{}", dr.to_degrees());
}

#[test]
fn single_pose_is_insufficient() {
    let mut rng = rng(12);
    let traj = random_spline(&mut rng, 2.0, 0.1);
    let (vels, poses) = spline_measurements(&traj, &Extrinsics::identity(), 2.0, 10.0, 10.0);
    let err = CalibrationProblem::new(vels, poses[..1].to_vec(), ProblemOptions::default()).unwrap_err();
    assert!(matches!(err, CalibrationError::InsufficientData(_)));
}

#[test]
fn velocity_outside_pose_span_is_a_domain_error() {
    let mut rng = rng(13);
    let traj = random_spline(&mut rng, 2.0, 0.1);
    let (mut vels, poses) = spline_measurements(&traj, &Extrinsics::identity(), 2.0, 10.0, 10.0);
    vels[0].t = 50.0;
    let err = CalibrationProblem::new(vels, poses, ProblemOptions::default()).unwrap_err();
    assert!(matches!(err, CalibrationError::Domain(_)));
}

#[test]
fn zero_noise_simulation_recovers_extrinsics() {
    let cfg = SimConfig::default();
    let ds = simulate_dataset(&cfg).unwrap();
    let vels = ds.velocity_estimates(&MlesacParams::default(), 1);
    let (_, sol) = calibrate(vels, ds.pose_measurements.clone(), ProblemOptions::default(), &lm()).unwrap();
    let (dt, dr) = sol.extrinsics.error_to(&ds.truth.extrinsics);
    assert!(sol.report.converged);
    assert!(dt < 1e-3, "{dt}");
    assert!(dr.to_degrees() < 0.01, "{}", dr.to_degrees());
}

fn noisy_dataset(seed: u64) -> radcal::simulator::SyntheticDataset {
    let mut cfg = SimConfig { seed, ..SimConfig::default() };
    cfg.radar.mode = VelocityMode::Direct;
    cfg.camera.pixel_noise = 1.0;
    simulate_dataset(&cfg).unwrap()
}

fn direct_options(ds: &radcal::simulator::SyntheticDataset) -> ProblemOptions {
    ProblemOptions {
        velocity_noise: VelocityNoise::Constant { sigma: ds.config.radar.velocity_sigma },
        ..ProblemOptions::default()
    }
}

#[test]
fn uniform_reweighting_keeps_minimizer() {
    let ds = noisy_dataset(21);
    let opts = direct_options(&ds);
    let vels = ds.velocity_estimates(&MlesacParams::default(), 0);
    let problem = CalibrationProblem::new(vels.clone(), ds.pose_measurements.clone(), opts).unwrap();
    let init = initialize(&problem, &lm()).unwrap();
    let a = solve_calibration(&init, &lm()).unwrap();

    let mut doubled = init.clone();
    doubled.options.velocity_noise = VelocityNoise::Constant { sigma: ds.config.radar.velocity_sigma * 2f64.sqrt() };
    for m in &mut doubled.pose_measurements {
        m.covariance *= 2.0;
    }
    let b = solve_calibration(&doubled, &lm()).unwrap();
    let (dt, dr) = a.extrinsics.error_to(&b.extrinsics);
    assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
    assert!((b.report.final_cost - 0.5 * a.report.final_cost).abs() < 1e-6 * a.report.final_cost);
}

#[test]
fn whitened_residuals_have_unit_spread() {
    let mut cfg = SimConfig { seed: 31, camera_rate: 60.0, ..SimConfig::default() };
    cfg.radar.mode = VelocityMode::Direct;
    cfg.camera.pixel_noise = 1.0;
    let ds = simulate_dataset(&cfg).unwrap();
    let (_, sol) = calibrate(ds.velocity_estimates(&MlesacParams::default(), 0), ds.pose_measurements.clone(), direct_options(&ds), &lm()).unwrap();
    assert!(sol.stats.num_residuals >= 500);
    let s = sol.stats.whitened_std;
    assert!((0.8..=1.2).contains(&s), "whitened std {s}");
}

#[test]
fn scale_estimate_on_metric_data_is_unity() {
    let ds = noisy_dataset(41);
    let opts = ProblemOptions { scale_mode: ScaleMode::Estimated, ..direct_options(&ds) };
    let (_, sol) = calibrate(ds.velocity_estimates(&MlesacParams::default(), 0), ds.pose_measurements.clone(), opts, &lm()).unwrap();
    assert!((sol.scale - 1.0).abs() < 0.01, "scale {}", sol.scale);
    assert!(sol.scale_variance.unwrap() > 0.0);
}

#[test]
fn scale_is_recovered_from_scaled_poses() {
    let mut rng = rng(14);
    let traj = random_spline(&mut rng, 6.0, 0.1);
    let extr = random_extrinsics(&mut rng);
    let (vels, mut poses) = spline_measurements(&traj, &extr, 6.0, 20.0, 10.0);
    for m in &mut poses {
        m.pose.translation *= 0.5;
    }
    let opts = ProblemOptions { scale_mode: ScaleMode::Estimated, ..ProblemOptions::default() };
    let (_, sol) = calibrate(vels, poses, opts, &lm()).unwrap();
    assert!((sol.scale - 2.0).abs() < 1e-6, "{}", sol.scale);
    let (dt, dr) = sol.extrinsics.error_to(&extr);
    assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn world_frame_change_leaves_extrinsics_unchanged(
        rx in -3.0f64..3.0, ry in -3.0f64..3.0, rz in -3.0f64..3.0,
        tx in -10.0f64..10.0, ty in -10.0f64..10.0, tz in -10.0f64..10.0,
    ) {
        let ds = noisy_dataset(51);
        let opts = direct_options(&ds);
        let vels = ds.velocity_estimates(&MlesacParams::default(), 0);
        let (_, a) = calibrate(vels.clone(), ds.pose_measurements.clone(), opts, &lm()).unwrap();
        let g = Pose::new(exp_so3(&Vector3::new(rx, ry, rz)), Vector3::new(tx, ty, tz));
        let moved = transform_world(&ds.pose_measurements, &g);
        let (_, b) = calibrate(vels, moved, opts, &lm()).unwrap();
        let (dt, dr) = a.extrinsics.error_to(&b.extrinsics);
        prop_assert!(dt < 1e-6 && dr < 1e-6, "{} {}", dt, dr);
    }
}
