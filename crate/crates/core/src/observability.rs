//! Identifiability diagnostics for the extrinsic parameters.
//!
//! The camera velocity is related to the radar velocity through
//! `h = α·(R·v − [ω]×·r)`, where `v` is the radar-frame linear velocity and
//! `ω` the camera-frame angular velocity. Stacking the gradient of `h` with
//! respect to `(r, φ, α)` at several times gives an observability matrix
//! whose numerical rank tells whether the extrinsics can be recovered.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Extrinsics;
use crate::geometry::{left_jacobian, left_jacobian_inverse, log_so3, skew, SplineError, TrajectorySpline};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservabilityError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error(transparent)]
    Domain(#[from] SplineError),
    #[error("invalid window [{start}, {end}]")]
    InvalidWindow { start: f64, end: f64 },
}

/// Radar-frame linear velocity and camera-frame angular velocity at `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSample {
    pub t: f64,
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
}

/// Linearization point: extrinsics plus scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePoint {
    pub extrinsics: Extrinsics,
    pub scale: f64,
}

impl StatePoint {
    pub fn new(extrinsics: Extrinsics, scale: f64) -> Self {
        Self { extrinsics, scale }
    }
}

pub type Gradient = SMatrix<f64, 3, 7>;

/// Gradient of `h` with column blocks `(r: 3, φ: 3, α: 1)`.
pub fn lie_derivative_gradient(sample: &MotionSample, x: &StatePoint) -> Gradient {
    let r = x.extrinsics.rotation;
    let j = left_jacobian(&log_so3(&r));
    let rv = r * sample.v;
    let w = skew(&sample.omega);
    let mut g = Gradient::zeros();
    g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-x.scale * w));
    g.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-x.scale * skew(&rv) * j));
    g.fixed_view_mut::<3, 1>(0, 6).copy_from(&(rv - w * x.extrinsics.translation));
    g
}

/// Row-stacked gradients. With `scale_known` the α column is dropped.
pub fn observability_matrix(samples: &[MotionSample], x: &StatePoint, scale_known: bool) -> DMatrix<f64> {
    let cols = if scale_known { 6 } else { 7 };
    let mut o = DMatrix::zeros(3 * samples.len(), cols);
    for (i, s) in samples.iter().enumerate() {
        let g = lie_derivative_gradient(s, x);
        o.view_mut((3 * i, 0), (3, cols)).copy_from(&g.columns(0, cols));
    }
    o
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `σ_max·rel_tol`.
pub fn numerical_rank(sv: &[f64], rel_tol: f64) -> usize {
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s > max * rel_tol).count(),
        _ => 0,
    }
}

/// The three null vectors of a single known-scale gradient, as columns
/// `(r: 3, φ: 3)`.
pub fn nullspace_known_scale(sample: &MotionSample, x: &StatePoint) -> Result<SMatrix<f64, 6, 3>, ObservabilityError> {
    let w = sample.omega;
    let rv = x.extrinsics.rotation * sample.v;
    if w.norm() == 0.0 {
        return Err(ObservabilityError::DegenerateInput("zero angular velocity"));
    }
    if rv.norm() == 0.0 {
        return Err(ObservabilityError::DegenerateInput("zero linear velocity"));
    }
    let j_inv = left_jacobian_inverse(&log_so3(&x.extrinsics.rotation));
    let a = j_inv * rv;
    let project_out = |d: &Vector3<f64>| Matrix3::identity() - d * d.transpose() / d.norm_squared();

    let mut u = SMatrix::<f64, 6, 3>::zeros();
    u.fixed_view_mut::<3, 1>(0, 0).copy_from(&w);
    u.fixed_view_mut::<3, 1>(3, 1).copy_from(&a);
    u.fixed_view_mut::<3, 1>(0, 2).copy_from(&(project_out(&w) * rv));
    u.fixed_view_mut::<3, 1>(3, 2).copy_from(&(project_out(&a) * j_inv * w));
    Ok(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationThresholds {
    /// Minimum normalized cross product between two rates.
    pub collinearity: f64,
    /// Relative singular-value threshold for the numerical rank.
    pub rank_tolerance: f64,
    /// Scores below `marginal_factor·collinearity` are reported as marginal.
    pub marginal_factor: f64,
    /// Smallest-to-largest singular value ratio below which the verdict is
    /// marginal.
    pub marginal_conditioning: f64,
    /// Rates with norm below this are ignored by the axis checks.
    pub min_rate: f64,
    pub num_samples: usize,
}

impl Default for ExcitationThresholds {
    fn default() -> Self {
        Self {
            collinearity: 0.05,
            rank_tolerance: 1e-8,
            marginal_factor: 4.0,
            marginal_conditioning: 1e-4,
            min_rate: 1e-2,
            num_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Observable,
    Marginal,
    Degenerate,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Observable => "observable",
            Verdict::Marginal => "marginal",
            Verdict::Degenerate => "degenerate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub rank: usize,
    pub num_columns: usize,
    pub singular_values: Vec<f64>,
    /// Largest pairwise `‖ω₂×ω₁‖/(‖ω₁‖‖ω₂‖)`.
    pub rotation_score: f64,
    /// Largest pairwise `‖v₂×v₁‖/(‖v₁‖‖v₂‖)`.
    pub translation_score: f64,
    pub rotation_axes_ok: bool,
    pub translation_axes_ok: bool,
    pub verdict: Verdict,
    pub worst_constraint: String,
    pub num_samples: usize,
}

/// Largest normalized cross product over all pairs of vectors whose norm
/// exceeds `min_norm`.
pub fn max_pairwise_cross(vs: &[Vector3<f64>], min_norm: f64) -> f64 {
    let units: Vec<Vector3<f64>> = vs.iter().filter(|v| v.norm() > min_norm).map(|v| v.normalize()).collect();
    let mut best: f64 = 0.0;
    for i in 0..units.len() {
        for j in 0..i {
            best = best.max(units[i].cross(&units[j]).norm());
        }
    }
    best
}

/// Verdict from a set of motion samples.
pub fn excitation_from_samples(
    samples: &[MotionSample],
    x: &StatePoint,
    scale_known: bool,
    th: &ExcitationThresholds,
) -> ExcitationReport {
    let omegas: Vec<Vector3<f64>> = samples.iter().map(|s| s.omega).collect();
    let vels: Vec<Vector3<f64>> = samples.iter().map(|s| s.v).collect();
    let rotation_score = max_pairwise_cross(&omegas, th.min_rate);
    let translation_score = max_pairwise_cross(&vels, th.min_rate);
    let rotation_axes_ok = rotation_score >= th.collinearity;
    let translation_axes_ok = translation_score >= th.collinearity;

    let o = observability_matrix(samples, x, scale_known);
    let sv = singular_values(&o);
    let rank = numerical_rank(&sv, th.rank_tolerance);
    let num_columns = o.ncols();
    let conditioning = match (sv.first(), sv.get(num_columns - 1)) {
        (Some(&max), Some(&min)) if max > 0.0 => min / max,
        _ => 0.0,
    };

    let (verdict, worst_constraint) = if !rotation_axes_ok {
        (Verdict::Degenerate, format!("rotation axes collinear (score {rotation_score:.3e})"))
    } else if !translation_axes_ok {
        (Verdict::Degenerate, format!("translation axes collinear (score {translation_score:.3e})"))
    } else if rank < num_columns {
        (Verdict::Degenerate, format!("observability matrix rank {rank} < {num_columns}"))
    } else if rotation_score < th.marginal_factor * th.collinearity || translation_score < th.marginal_factor * th.collinearity {
        let (name, score) = if rotation_score <= translation_score {
            ("rotation", rotation_score)
        } else {
            ("translation", translation_score)
        };
        (Verdict::Marginal, format!("weak {name} excitation (score {score:.3e})"))
    } else if conditioning < th.marginal_conditioning {
        (Verdict::Marginal, format!("poorly conditioned observability matrix ({conditioning:.3e})"))
    } else {
        let (name, score) = if rotation_score <= translation_score {
            ("rotation", rotation_score)
        } else {
            ("translation", translation_score)
        };
        (Verdict::Observable, format!("{name} axes (score {score:.3e})"))
    };

    ExcitationReport {
        rank,
        num_columns,
        singular_values: sv,
        rotation_score,
        translation_score,
        rotation_axes_ok,
        translation_axes_ok,
        verdict,
        worst_constraint,
        num_samples: samples.len(),
    }
}

/// Samples radar-frame velocity and camera-frame angular velocity from a
/// radar trajectory `T_wr(t)` at `n` evenly spaced times in `[start, end]`.
pub fn sample_motion(
    trajectory: &TrajectorySpline,
    window: (f64, f64),
    extrinsics: &Extrinsics,
    n: usize,
) -> Result<Vec<MotionSample>, ObservabilityError> {
    let (start, end) = window;
    if !(start.is_finite() && end.is_finite() && end >= start) || n == 0 {
        return Err(ObservabilityError::InvalidWindow { start, end });
    }
    let cfg = trajectory.config();
    cfg.normalized_time(start)?;
    // The domain is half-open; keep the last sample strictly inside.
    let last = if end >= cfg.end() { cfg.end() - 1e-9 * cfg.knot_spacing } else { end };
    cfg.normalized_time(last)?;
    (0..n)
        .map(|i| {
            let t = if n == 1 { start } else { start + (last - start) * i as f64 / (n - 1) as f64 };
            let s = trajectory.sample(t)?;
            Ok(MotionSample { t, v: s.body_velocity, omega: extrinsics.rotation * s.angular_velocity })
        })
        .collect()
}

/// Audits a trajectory window against the excitation constraints.
pub fn check_excitation(
    trajectory: &TrajectorySpline,
    window: (f64, f64),
    x: &StatePoint,
    scale_known: bool,
    th: &ExcitationThresholds,
) -> Result<ExcitationReport, ObservabilityError> {
    let samples = sample_motion(trajectory, window, &x.extrinsics, th.num_samples.max(2))?;
    Ok(excitation_from_samples(&samples, x, scale_known, th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_state() -> StatePoint {
        StatePoint::new(Extrinsics::identity(), 1.0)
    }

    fn random_vec(rng: &mut impl Rng) -> Vector3<f64> {
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    }

    fn random_state(rng: &mut impl Rng) -> StatePoint {
        let extr = Extrinsics { rotation: exp_so3(&(random_vec(rng) * 2.5)), translation: random_vec(rng) * 0.5 };
        StatePoint::new(extr, rng.random_range(0.5..2.0))
    }

    #[test]
    fn no_motion_gives_zero_gradient() {
        let mut x = identity_state();
        x.extrinsics.translation = Vector3::new(0.3, -0.2, 0.1);
        let g = lie_derivative_gradient(&MotionSample { t: 0.0, v: Vector3::zeros(), omega: Vector3::zeros() }, &x);
        assert_eq!(g, Gradient::zeros());
    }

    #[test]
    fn gradient_at_identity() {
        let s = MotionSample { t: 0.0, v: Vector3::x(), omega: Vector3::z() };
        let g = lie_derivative_gradient(&s, &identity_state());
        assert_relative_eq!(g.fixed_view::<3, 3>(0, 0).into_owned(), -skew(&Vector3::z()));
        assert_relative_eq!(g.fixed_view::<3, 3>(0, 3).into_owned(), -skew(&Vector3::x()));
        assert_relative_eq!(g.column(6).into_owned(), Vector3::x());
    }

    #[test]
    fn gradient_scales_with_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = MotionSample { t: 0.0, v: random_vec(&mut rng), omega: random_vec(&mut rng) };
        let x = random_state(&mut rng);
        let mut x3 = x;
        x3.scale *= 3.0;
        let (g1, g3) = (lie_derivative_gradient(&s, &x), lie_derivative_gradient(&s, &x3));
        assert_relative_eq!(g3.columns(0, 6).into_owned(), 3.0 * g1.columns(0, 6).into_owned(), epsilon = 1e-12);
        assert_relative_eq!(g3.column(6).into_owned(), g1.column(6).into_owned());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Independent route: differentiate h = α(R·v − ω×r) numerically.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = MotionSample { t: 0.0, v: random_vec(&mut rng), omega: random_vec(&mut rng) };
            let x = random_state(&mut rng);
            let phi0 = log_so3(&x.extrinsics.rotation);
            let h = |p: &[f64; 7]| {
                let r = Vector3::new(p[0], p[1], p[2]);
                let rot = exp_so3(&Vector3::new(p[3], p[4], p[5]));
                p[6] * (rot * s.v - s.omega.cross(&r))
            };
            let t = x.extrinsics.translation;
            let base = [t.x, t.y, t.z, phi0.x, phi0.y, phi0.z, x.scale];
            let g = lie_derivative_gradient(&s, &x);
            for c in 0..7 {
                let (mut a, mut b) = (base, base);
                a[c] += 1e-6;
                b[c] -= 1e-6;
                let col = (h(&a) - h(&b)) / 2e-6;
                assert!((col - g.column(c)).norm() < 1e-7, "column {c}");
            }
        }
    }

    #[test]
    fn nullspace_columns_annihilated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = MotionSample { t: 0.0, v: random_vec(&mut rng), omega: random_vec(&mut rng) };
            let x = random_state(&mut rng);
            let g = lie_derivative_gradient(&s, &x).columns(0, 6).into_owned();
            let u = nullspace_known_scale(&s, &x).unwrap();
            for c in 0..3 {
                let col = u.column(c);
                assert!((&g * col).norm() <= 1e-9 * g.norm() * col.norm(), "column {c}");
            }
        }
    }

    #[test]
    fn nullspace_first_two_columns() {
        let s = MotionSample { t: 0.0, v: Vector3::new(0.5, 1.0, -0.2), omega: Vector3::new(0.1, 0.0, 0.3) };
        let x = identity_state();
        let u = nullspace_known_scale(&s, &x).unwrap();
        assert_relative_eq!(u.fixed_view::<3, 1>(0, 0).into_owned(), s.omega);
        assert_eq!(u.fixed_view::<3, 1>(3, 0).into_owned(), Vector3::zeros());
        assert_relative_eq!(u.fixed_view::<3, 1>(3, 1).into_owned(), s.v);
    }

    #[test]
    fn nullspace_rejects_zero_rates() {
        let x = identity_state();
        let s = MotionSample { t: 0.0, v: Vector3::x(), omega: Vector3::zeros() };
        assert!(nullspace_known_scale(&s, &x).is_err());
        let s = MotionSample { t: 0.0, v: Vector3::zeros(), omega: Vector3::x() };
        assert!(nullspace_known_scale(&s, &x).is_err());
    }

    #[test]
    fn rank_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let samples: Vec<MotionSample> =
                (0..3).map(|i| MotionSample { t: i as f64, v: random_vec(&mut rng), omega: random_vec(&mut rng) }).collect();
            let sv = singular_values(&observability_matrix(&samples, &x, false));
            assert_eq!(numerical_rank(&sv, 1e-8), 7);
            let sv = singular_values(&observability_matrix(&samples, &x, true));
            assert_eq!(numerical_rank(&sv, 1e-8), 6);

            let same = vec![samples[0]; 5];
            let sv = singular_values(&observability_matrix(&same, &x, false));
            assert!(numerical_rank(&sv, 1e-8) <= 3);

            let still: Vec<MotionSample> = samples.iter().map(|s| MotionSample { omega: Vector3::zeros(), ..*s }).collect();
            let o = observability_matrix(&still, &x, false);
            assert!(numerical_rank(&singular_values(&o), 1e-8) <= 4);
            assert_eq!(o.columns(0, 3).norm(), 0.0);
        }
    }

    #[test]
    fn collinear_rates_lose_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_state(&mut rng);
        let axis = random_vec(&mut rng);
        let samples: Vec<MotionSample> = (0..6)
            .map(|i| MotionSample { t: i as f64, v: random_vec(&mut rng), omega: axis * (0.5 + i as f64) })
            .collect();
        let rep = excitation_from_samples(&samples, &x, true, &ExcitationThresholds::default());
        assert!(rep.rank < 6);
        assert!(!rep.rotation_axes_ok);
        assert_eq!(rep.verdict, Verdict::Degenerate);

        let dir = random_vec(&mut rng);
        let samples: Vec<MotionSample> = (0..6)
            .map(|i| MotionSample { t: i as f64, v: dir * (1.0 + i as f64), omega: random_vec(&mut rng) })
            .collect();
        let rep = excitation_from_samples(&samples, &x, true, &ExcitationThresholds::default());
        assert!(rep.rank < 6);
        assert!(!rep.translation_axes_ok);
        assert_eq!(rep.verdict, Verdict::Degenerate);
    }

    #[test]
    fn rank_ignores_row_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_state(&mut rng);
        let mut samples: Vec<MotionSample> =
            (0..4).map(|i| MotionSample { t: i as f64, v: random_vec(&mut rng), omega: random_vec(&mut rng) * 1e-3 }).collect();
        let r1 = numerical_rank(&singular_values(&observability_matrix(&samples, &x, false)), 1e-8);
        samples.reverse();
        samples.swap(0, 2);
        let r2 = numerical_rank(&singular_values(&observability_matrix(&samples, &x, false)), 1e-8);
        assert_eq!(r1, r2);
    }

    #[test]
    fn excited_samples_are_observable() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_state(&mut rng);
        let samples: Vec<MotionSample> =
            (0..10).map(|i| MotionSample { t: i as f64, v: random_vec(&mut rng), omega: random_vec(&mut rng) }).collect();
        let rep = excitation_from_samples(&samples, &x, false, &ExcitationThresholds::default());
        assert_eq!(rep.verdict, Verdict::Observable, "{rep:?}");
        assert_eq!(rep.rank, 7);
    }

    #[test]
    fn pairwise_cross_examples() {
        assert_eq!(max_pairwise_cross(&[Vector3::x(), Vector3::x() * 3.0], 1e-6), 0.0);
        assert_relative_eq!(max_pairwise_cross(&[Vector3::x(), Vector3::y(), -Vector3::x()], 1e-6), 1.0);
        assert_eq!(max_pairwise_cross(&[Vector3::x(), Vector3::y() * 1e-9], 1e-6), 0.0);
    }
}
