//! Rotation and pose algebra plus cumulative B-spline trajectories.

pub mod pose;
pub mod so3;
pub mod spline;

pub use pose::Pose;
pub use so3::{exp_so3, left_jacobian, left_jacobian_inverse, log_so3, right_jacobian, skew, vee};
pub use spline::{
    mixing_matrix, CumulativeBasis, RotationSpline, SplineConfig, SplineError, TrajectorySample, TrajectorySpline,
    TranslationSpline,
};

/// 3-vector of reals (m, m/s or rad/s depending on context).
pub type Vec3 = nalgebra::Vector3<f64>;
/// Element of SO(3) stored as a 3×3 matrix.
pub type Rotation = nalgebra::Rotation3<f64>;
