//! Rotation-group utilities: hat operator, exponential and logarithm maps,
//! and the left Jacobian of SO(3) with its inverse.
//!
//! Rotation vectors follow the angle-axis convention `φ = θ·a` with unit axis
//! `a`. Perturbations are applied on the left, `R ← exp(δφ)·R`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};

/// Below this angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Within this distance of π the logarithm recovers the axis from the
/// symmetric part of the matrix instead of the skew part.
const NEAR_PI: f64 = 1e-4;

/// Skew-symmetric matrix `[v]×` such that `[v]×·s = v × s`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    #[rustfmt::skip]
    let m = Matrix3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    );
    m
}

/// Inverse of [`skew`]; reads the vector back out of an antisymmetric matrix.
#[inline]
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map so(3) → SO(3) (Rodrigues' formula).
pub fn exp_so3(phi: &Vector3<f64>) -> Rotation3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k2
    } else {
        let a = theta.sin() / theta;
        let half = (0.5 * theta).sin() / theta;
        let b = 2.0 * half * half;
        Matrix3::identity() + a * k + b * k2
    };
    Rotation3::from_matrix_unchecked(m)
}

/// Logarithm map SO(3) → so(3), returning the rotation vector with angle in
/// `[0, π]`.
///
/// At exactly π the axis sign is ambiguous; the returned axis has its first
/// nonzero component nonnegative.
pub fn log_so3(r: &Rotation3<f64>) -> Vector3<f64> {
    let m = r.matrix();
    let cos = 0.5 * (m.trace() - 1.0);
    // 2·sin(θ)·a
    let w = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    let sin = 0.5 * w.norm();
    let theta = sin.atan2(cos);

    if theta < SMALL_ANGLE {
        // θ / (2 sin θ) ≈ (1 + θ²/6) / 2
        return 0.5 * (1.0 + theta * theta / 6.0) * w;
    }
    if PI - theta > NEAR_PI {
        return (theta / (2.0 * sin)) * w;
    }

    // Symmetric part: (R + Rᵀ)/2 − cosθ·I = (1 − cosθ)·a·aᵀ.
    let s = (0.5 * (m + m.transpose()) - cos * Matrix3::identity()) / (1.0 - cos);
    let pivot = (0..3)
        .max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = s.column(pivot).into_owned() / s[(pivot, pivot)].max(0.0).sqrt();
    axis.normalize_mut();

    if w.norm() > 1e-10 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else if let Some(first) = axis.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            axis = -axis;
        }
    }
    theta * axis
}

/// Left Jacobian of SO(3): `exp(φ + δ) ≈ exp(J(φ)·δ)·exp(φ)`.
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * k + k2 / 6.0;
    }
    let t2 = theta * theta;
    // (1 − cos θ)/θ² in half-angle form to avoid cancellation
    let half = (0.5 * theta).sin() / theta;
    Matrix3::identity() + (2.0 * half * half) * k + ((theta - theta.sin()) / (t2 * theta)) * k2
}

/// Inverse of [`left_jacobian`]. Singular at θ = 2π, which never occurs for
/// rotation vectors produced by [`log_so3`].
pub fn left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + k2 / 12.0;
    }
    let coeff = 1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() - 0.5 * k + coeff * k2
}

/// Right Jacobian, `J_r(φ) = J_l(−φ)`.
#[inline]
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    left_jacobian(&-phi)
}

/// Angle of the relative rotation between `a` and `b`, in radians.
pub fn angle_between(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    log_so3(&(a * b.inverse())).norm()
}

/// Projects an arbitrary 3×3 matrix onto the closest rotation (Frobenius norm).
pub fn orthonormalize(m: &Matrix3<f64>) -> Rotation3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    Rotation3::from_matrix_unchecked(u * d * v_t)
}

/// Whether `m` is orthonormal with unit determinant to within `tol`.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    err <= tol && (m.determinant() - 1.0).abs() <= tol
}
