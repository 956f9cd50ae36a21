use std::ops::Mul;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::so3::{exp_so3, log_so3};

/// Rigid-body transform in split form: `p_a = R_ab·p_b + r_a^{ba}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), translation)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.inverse();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Left-multiplies by the split increment `(exp(δφ), δr)`, so that
    /// `self.boxplus(ξ)·self⁻¹ = (exp(δφ), δr)` exactly. `xi` is ordered
    /// translation first.
    pub fn boxplus(&self, xi: &nalgebra::Vector6<f64>) -> Pose {
        let dr = Vector3::new(xi[0], xi[1], xi[2]);
        let dphi = Vector3::new(xi[3], xi[4], xi[5]);
        Pose::new(exp_so3(&dphi), dr).compose(self)
    }

    /// Translation distance and rotation angle (rad) between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let dt = (self.translation - other.translation).norm();
        let dr = log_so3(&(self.rotation * other.rotation.inverse())).norm();
        (dt, dr)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}
