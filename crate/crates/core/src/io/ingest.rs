//! Turns radar and pose logs into an initialized calibration problem.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::{RunConfig, SCAN_TOLERANCE};
use super::formats::{group_scans, load_pose_jsonl, load_radar_csv, FormatError};
use crate::calibration::{initialize, CalibrationError, CalibrationProblem, PoseMeasurement, ScaleMode};
use crate::observability::{check_excitation, ExcitationReport, ObservabilityError, StatePoint};
use crate::radar::{mlesac_velocity, RadarDetection, VelocityEstimate};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("no {0} in input")]
    Empty(&'static str),
    #[error("radar time range [{radar_start}, {radar_end}] does not overlap pose time range [{pose_start}, {pose_end}]")]
    NoOverlap { radar_start: f64, radar_end: f64, pose_start: f64, pose_end: f64 },
    #[error("velocity estimation failed for all {0} scans")]
    NoVelocity(usize),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Per-scan velocity estimates and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityBatch {
    pub estimates: Vec<VelocityEstimate>,
    pub num_scans: usize,
    pub failed_scans: usize,
}

/// Applies the time offset, groups detections into scans and runs MLESAC on
/// each. Scan `i` uses a generator seeded from `(config.seed, i)`.
pub fn estimate_velocities(detections: &[RadarDetection], config: &RunConfig) -> VelocityBatch {
    let shifted: Vec<RadarDetection> =
        detections.iter().map(|d| RadarDetection { t: d.t + config.time_offset, ..*d }).collect();
    let scans = group_scans(&shifted, SCAN_TOLERANCE);
    let mut estimates = Vec::with_capacity(scans.len());
    let mut failed = 0;
    for (i, scan) in scans.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64);
        match mlesac_velocity(scan, &config.mlesac, &mut rng) {
            Ok(e) => estimates.push(e),
            Err(e) => {
                failed += 1;
                log::debug!("scan {i} at t={}: {e}", scan[0].t);
            }
        }
    }
    VelocityBatch { estimates, num_scans: scans.len(), failed_scans: failed }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    /// Initialized problem.
    pub problem: CalibrationProblem,
    pub num_detections: usize,
    pub num_scans: usize,
    pub failed_scans: usize,
    /// Velocity estimates outside the pose time span.
    pub dropped_velocities: usize,
}

/// Builds and initializes a problem from in-memory data.
pub fn ingest_data(detections: &[RadarDetection], poses: Vec<PoseMeasurement>, config: &RunConfig) -> Result<Ingested, IngestError> {
    if detections.is_empty() {
        return Err(IngestError::Empty("radar detections"));
    }
    if poses.is_empty() {
        return Err(IngestError::Empty("pose measurements"));
    }
    let shifted = time_range(detections.iter().map(|d| d.t + config.time_offset));
    check_overlap(shifted, &poses)?;

    let batch = estimate_velocities(detections, config);
    if batch.estimates.is_empty() {
        return Err(IngestError::NoVelocity(batch.num_scans));
    }
    let mut out = build_problem(batch.estimates, poses, config)?;
    out.num_detections = detections.len();
    out.num_scans = batch.num_scans;
    out.failed_scans = batch.failed_scans;
    Ok(out)
}

/// Like [`ingest_data`] but starting from per-scan velocity estimates, e.g.
/// the output of the `velocity` subcommand. The time offset is applied to
/// the estimate times.
pub fn ingest_velocities(
    velocities: Vec<VelocityEstimate>,
    poses: Vec<PoseMeasurement>,
    config: &RunConfig,
) -> Result<Ingested, IngestError> {
    if velocities.is_empty() {
        return Err(IngestError::Empty("velocity estimates"));
    }
    if poses.is_empty() {
        return Err(IngestError::Empty("pose measurements"));
    }
    let shifted: Vec<VelocityEstimate> =
        velocities.into_iter().map(|v| VelocityEstimate { t: v.t + config.time_offset, ..v }).collect();
    let (start, end) = time_range(shifted.iter().map(|v| v.t));
    check_overlap((start, end), &poses)?;
    let n = shifted.len();
    let mut out = build_problem(shifted, poses, config)?;
    out.num_scans = n;
    Ok(out)
}

fn time_range(ts: impl Iterator<Item = f64>) -> (f64, f64) {
    ts.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)))
}

fn check_overlap(radar: (f64, f64), poses: &[PoseMeasurement]) -> Result<(f64, f64), IngestError> {
    let (pose_start, pose_end) = time_range(poses.iter().map(|p| p.t));
    let (radar_start, radar_end) = radar;
    if radar_end < pose_start || radar_start > pose_end {
        return Err(IngestError::NoOverlap { radar_start, radar_end, pose_start, pose_end });
    }
    Ok((pose_start, pose_end))
}

fn build_problem(
    estimates: Vec<VelocityEstimate>,
    poses: Vec<PoseMeasurement>,
    config: &RunConfig,
) -> Result<Ingested, IngestError> {
    let radar = time_range(estimates.iter().map(|e| e.t));
    let (pose_start, pose_end) = check_overlap(radar, &poses)?;
    let (inside, outside): (Vec<_>, Vec<_>) = estimates.into_iter().partition(|e| e.t >= pose_start && e.t <= pose_end);
    if !outside.is_empty() {
        log::info!("dropping {} velocity estimates outside the pose time range", outside.len());
    }
    if inside.is_empty() {
        return Err(IngestError::NoOverlap { radar_start: radar.0, radar_end: radar.1, pose_start, pose_end });
    }
    let problem = CalibrationProblem::new(inside, poses, config.problem_options())?;
    let problem = initialize(&problem, &config.lm)?;
    Ok(Ingested { problem, num_detections: 0, num_scans: 0, failed_scans: 0, dropped_velocities: outside.len() })
}

/// Reads both logs and builds an initialized problem.
pub fn ingest(radar_path: &Path, pose_path: &Path, config: &RunConfig) -> Result<Ingested, IngestError> {
    let detections = load_radar_csv(radar_path)?;
    let poses = load_pose_jsonl(pose_path)?;
    ingest_data(&detections, poses, config)
}

/// Excitation audit of a problem's current trajectory over the time span
/// covered by both velocity and pose measurements.
pub fn problem_excitation(problem: &CalibrationProblem, config: &RunConfig) -> Result<ExcitationReport, ObservabilityError> {
    let (v0, v1) = time_range(problem.velocity_measurements.iter().map(|v| v.t));
    let (p0, p1) = time_range(problem.pose_measurements.iter().map(|p| p.t));
    check_excitation(
        &problem.trajectory,
        (v0.max(p0), v1.min(p1)),
        &StatePoint::new(problem.extrinsics, problem.scale),
        config.scale_mode == ScaleMode::Fixed,
        &config.excitation,
    )
}
