//! Calibration report: machine-readable JSON plus a text summary.

use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::calibration::{CalibrationSolution, Extrinsics, ResidualStats};
use crate::geometry::{exp_so3, log_so3};
use crate::observability::ExcitationReport;
use crate::optimizer::SolveReport;
use crate::simulator::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicsRecord {
    /// `R_cr`, row-major.
    pub rotation_matrix: [[f64; 3]; 3],
    pub rotation_vector: [f64; 3],
    pub quaternion_wxyz: [f64; 4],
    /// `r_c^{rc}` (m).
    pub translation: [f64; 3],
}

impl From<&Extrinsics> for ExtrinsicsRecord {
    fn from(e: &Extrinsics) -> Self {
        let m = e.rotation.matrix();
        let phi = log_so3(&e.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&e.rotation);
        let sign = if q.w < 0.0 { -1.0 } else { 1.0 };
        Self {
            rotation_matrix: [0, 1, 2].map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]),
            rotation_vector: [phi.x, phi.y, phi.z],
            quaternion_wxyz: [q.w, q.i, q.j, q.k].map(|c| sign * c),
            translation: [e.translation.x, e.translation.y, e.translation.z],
        }
    }
}

impl ExtrinsicsRecord {
    pub fn to_extrinsics(&self) -> Extrinsics {
        Extrinsics { rotation: exp_so3(&Vector3::from(self.rotation_vector)), translation: Vector3::from(self.translation) }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub radar: Option<String>,
    pub poses: Option<String>,
    pub num_detections: usize,
    pub num_scans: usize,
    pub failed_scans: usize,
    pub num_velocities: usize,
    pub dropped_velocities: usize,
    pub num_poses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    /// Exact configuration of the run.
    pub config: RunConfig,
    pub inputs: InputSummary,
    pub extrinsics: ExtrinsicsRecord,
    pub scale: f64,
    pub scale_std: Option<f64>,
    /// Standard deviations of the rotation (rad) then translation (m)
    /// tangent coordinates.
    pub extrinsic_std: Option<[f64; 6]>,
    pub solver: SolveReport,
    pub residuals: ResidualStats,
    pub excitation: ExcitationReport,
    pub warnings: Vec<String>,
}

impl CalibrationReport {
    pub fn new(
        config: &RunConfig,
        inputs: InputSummary,
        solution: &CalibrationSolution,
        excitation: ExcitationReport,
        warnings: Vec<String>,
    ) -> Self {
        Self {
            schema_version: config.schema_version,
            config: *config,
            inputs,
            extrinsics: ExtrinsicsRecord::from(&solution.extrinsics),
            scale: solution.scale,
            scale_std: solution.scale_variance.map(f64::sqrt),
            extrinsic_std: solution.extrinsic_covariance.map(|c| [0, 1, 2, 3, 4, 5].map(|i| c[(i, i)].max(0.0).sqrt())),
            solver: solution.report.clone(),
            residuals: solution.stats,
            excitation,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Human-readable summary of a report.
pub fn render_summary(r: &CalibrationReport) -> String {
    let mut s = String::new();
    let e = &r.extrinsics;
    let _ = writeln!(s, "radar-to-camera extrinsics (T_cr)");
    let _ = writeln!(s, "  translation [m]:      {:>10.5} {:>10.5} {:>10.5}", e.translation[0], e.translation[1], e.translation[2]);
    let _ = writeln!(
        s,
        "  rotation vector [deg]: {:>9.4} {:>10.4} {:>10.4}",
        e.rotation_vector[0].to_degrees(),
        e.rotation_vector[1].to_degrees(),
        e.rotation_vector[2].to_degrees()
    );
    let _ = writeln!(s, "  rotation matrix:");
    for row in &e.rotation_matrix {
        let _ = writeln!(s, "    {:>10.6} {:>10.6} {:>10.6}", row[0], row[1], row[2]);
    }
    if let Some(sd) = r.extrinsic_std {
        let _ = writeln!(
            s,
            "  1-sigma: rotation [deg] {:.4} {:.4} {:.4}, translation [m] {:.5} {:.5} {:.5}",
            sd[0].to_degrees(),
            sd[1].to_degrees(),
            sd[2].to_degrees(),
            sd[3],
            sd[4],
            sd[5]
        );
    }
    let _ = match r.scale_std {
        Some(sd) => writeln!(s, "  scale: {:.6} ± {:.6}", r.scale, sd),
        None => writeln!(s, "  scale: {:.6} (fixed)", r.scale),
    };
    let v = &r.solver;
    let _ = writeln!(
        s,
        "solver: {} after {} iterations ({:?}), cost {:.6e} -> {:.6e}",
        if v.converged { "converged" } else { "NOT converged" },
        v.iterations,
        v.termination_reason,
        v.initial_cost,
        v.final_cost
    );
    let q = &r.residuals;
    let _ = writeln!(
        s,
        "residuals: velocity rms {:.4} m/s, pose rms {:.4} m / {:.4} deg, whitened std {:.3} over {}",
        q.rms_velocity,
        q.rms_pose_translation,
        q.rms_pose_rotation.to_degrees(),
        q.whitened_std,
        q.num_residuals
    );
    let x = &r.excitation;
    let _ = writeln!(
        s,
        "excitation: {} (rank {}/{}, rotation score {:.3}, translation score {:.3}; {})",
        x.verdict, x.rank, x.num_columns, x.rotation_score, x.translation_score, x.worst_constraint
    );
    let i = &r.inputs;
    let _ = writeln!(
        s,
        "inputs: {} detections in {} scans ({} failed), {} velocities used ({} outside pose span), {} poses",
        i.num_detections, i.num_scans, i.failed_scans, i.num_velocities, i.dropped_velocities, i.num_poses
    );
    for w in &r.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// Ground truth written next to a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub extrinsics: ExtrinsicsRecord,
    pub simulation: SimConfig,
}
