//! Line-oriented file formats.
//!
//! - radar log: CSV with header `t,range,azimuth,elevation,range_rate,intensity`
//! - pose log: JSON Lines, one `{"t", "q": [w, x, y, z], "r": [x, y, z],
//!   "covariance": [36 values, row-major]}` object per line, `q` and `r`
//!   describing `T_cw`; `covariance` is optional
//! - velocity table: CSV, one estimate per radar scan
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every value exactly.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix6, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{default_pose_covariance, PoseMeasurement};
use crate::geometry::Pose;
use crate::radar::{RadarDetection, VelocityEstimate};

pub const RADAR_HEADER: [&str; 6] = ["t", "range", "azimuth", "elevation", "range_rate", "intensity"];
pub const VELOCITY_HEADER: [&str; 12] =
    ["t", "vx", "vy", "vz", "cov_xx", "cov_xy", "cov_xz", "cov_yy", "cov_yz", "cov_zz", "inliers", "total"];

/// Quaternions must have unit norm within this tolerance.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Write { path: PathBuf, message: String },
}

impl FormatError {
    fn parse(path: &Path, line: u64, message: impl Into<String>) -> Self {
        FormatError::Parse { path: path.to_path_buf(), line, message: message.into() }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        FormatError::Io { path: path.to_path_buf(), source }
    }
}

fn open(path: &Path) -> Result<std::fs::File, FormatError> {
    std::fs::File::open(path).map_err(|e| FormatError::io(path, e))
}

fn create(path: &Path) -> Result<std::fs::File, FormatError> {
    std::fs::File::create(path).map_err(|e| FormatError::io(path, e))
}

/// Parses a radar log. Timestamps must be non-decreasing.
pub fn read_radar_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Vec<RadarDetection>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| FormatError::parse(path, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != RADAR_HEADER {
        return Err(FormatError::parse(path, 1, format!("expected header {}", RADAR_HEADER.join(","))));
    }
    let mut out: Vec<RadarDetection> = Vec::new();
    for rec in rdr.deserialize::<RadarDetection>() {
        let d = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            FormatError::parse(path, line, e.to_string())
        })?;
        let line = out.len() as u64 + 2;
        d.validate().map_err(|m| FormatError::parse(path, line, m))?;
        if let Some(prev) = out.last() {
            if d.t < prev.t {
                return Err(FormatError::parse(path, line, format!("timestamp {} decreases (previous {})", d.t, prev.t)));
            }
        }
        out.push(d);
    }
    Ok(out)
}

pub fn load_radar_csv(path: &Path) -> Result<Vec<RadarDetection>, FormatError> {
    read_radar_csv(open(path)?, path)
}

pub fn write_radar_csv<W: Write>(writer: W, detections: &[RadarDetection]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RADAR_HEADER)?;
    for d in detections {
        w.write_record([d.t, d.range, d.azimuth, d.elevation, d.range_rate, d.intensity].map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_radar_csv(path: &Path, detections: &[RadarDetection]) -> Result<(), FormatError> {
    write_radar_csv(create(path)?, detections).map_err(|e| FormatError::Write { path: path.to_path_buf(), message: e.to_string() })
}

/// One pose-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub t: f64,
    /// Unit quaternion `(w, x, y, z)` of `R_cw`.
    pub q: [f64; 4],
    pub r: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<f64>>,
}

impl PoseRecord {
    pub fn from_measurement(m: &PoseMeasurement, with_covariance: bool) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&m.pose.rotation);
        let mut q = [q.w, q.i, q.j, q.k];
        if q[0] < 0.0 {
            q = q.map(|c| -c);
        }
        let t = m.pose.translation;
        Self {
            t: m.t,
            q,
            r: [t.x, t.y, t.z],
            covariance: with_covariance.then(|| m.covariance.transpose().as_slice().to_vec()),
        }
    }

    /// Validates and converts to a measurement; a missing covariance takes
    /// the default.
    pub fn to_measurement(&self) -> Result<PoseMeasurement, String> {
        if !self.t.is_finite() || self.q.iter().chain(&self.r).any(|x| !x.is_finite()) {
            return Err("non-finite value".into());
        }
        let [w, x, y, z] = self.q;
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(format!("quaternion norm {norm} is not 1 within {QUATERNION_NORM_TOL}"));
        }
        let rotation: Rotation3<f64> = UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)).to_rotation_matrix();
        let covariance = match &self.covariance {
            None => default_pose_covariance(),
            Some(c) if c.len() == 36 => {
                let m = Matrix6::from_row_slice(c);
                if c.iter().any(|x| !x.is_finite()) || (m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1e-300) {
                    return Err("covariance must be finite and symmetric".into());
                }
                m
            }
            Some(c) => return Err(format!("covariance has {} values, expected 36", c.len())),
        };
        Ok(PoseMeasurement { t: self.t, pose: Pose::new(rotation, Vector3::from(self.r)), covariance })
    }
}

pub fn read_pose_records<R: BufRead>(reader: R, path: &Path) -> Result<Vec<PoseRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i as u64 + 1;
        let line = line.map_err(|e| FormatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| FormatError::parse(path, n, e.to_string()))?;
        rec.to_measurement().map_err(|m| FormatError::parse(path, n, m))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_pose_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<PoseMeasurement>, FormatError> {
    Ok(read_pose_records(reader, path)?.iter().map(|r| r.to_measurement().expect("validated while reading")).collect())
}

pub fn load_pose_jsonl(path: &Path) -> Result<Vec<PoseMeasurement>, FormatError> {
    read_pose_jsonl(std::io::BufReader::new(open(path)?), path)
}

pub fn write_pose_records<W: Write>(mut writer: W, records: &[PoseRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_pose_jsonl(path: &Path, measurements: &[PoseMeasurement]) -> Result<(), FormatError> {
    let records: Vec<PoseRecord> = measurements.iter().map(|m| PoseRecord::from_measurement(m, true)).collect();
    write_pose_records(std::io::BufWriter::new(create(path)?), &records).map_err(|e| FormatError::io(path, e))
}

pub fn write_velocity_csv<W: Write>(writer: W, estimates: &[VelocityEstimate]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(VELOCITY_HEADER)?;
    for e in estimates {
        let c = &e.covariance;
        let mut row: Vec<String> = [e.t, e.v.x, e.v.y, e.v.z, c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]]
            .iter()
            .map(|x| x.to_string())
            .collect();
        row.push(e.inlier_count.to_string());
        row.push(e.total_count.to_string());
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_velocity_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Vec<VelocityEstimate>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| FormatError::parse(path, 1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != VELOCITY_HEADER {
        return Err(FormatError::parse(path, 1, format!("expected header {}", VELOCITY_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| FormatError::parse(path, line, e.to_string()))?;
        let f = |k: usize| -> Result<f64, FormatError> {
            rec[k].parse::<f64>().map_err(|e| FormatError::parse(path, line, format!("column {}: {e}", VELOCITY_HEADER[k])))
        };
        let u = |k: usize| -> Result<usize, FormatError> {
            rec[k].parse::<usize>().map_err(|e| FormatError::parse(path, line, format!("column {}: {e}", VELOCITY_HEADER[k])))
        };
        let cov = Matrix3::new(f(4)?, f(5)?, f(6)?, f(5)?, f(7)?, f(8)?, f(6)?, f(8)?, f(9)?);
        out.push(VelocityEstimate {
            t: f(0)?,
            v: Vector3::new(f(1)?, f(2)?, f(3)?),
            covariance: cov,
            inlier_count: u(10)?,
            total_count: u(11)?,
        });
    }
    Ok(out)
}

pub fn save_velocity_csv(path: &Path, estimates: &[VelocityEstimate]) -> Result<(), FormatError> {
    write_velocity_csv(create(path)?, estimates).map_err(|e| FormatError::Write { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_velocity_csv(path: &Path) -> Result<Vec<VelocityEstimate>, FormatError> {
    read_velocity_csv(open(path)?, path)
}

/// Groups time-sorted detections into scans: a detection joins the current
/// scan when its timestamp is within `tolerance` of the scan's first one.
pub fn group_scans(detections: &[RadarDetection], tolerance: f64) -> Vec<Vec<RadarDetection>> {
    let mut scans: Vec<Vec<RadarDetection>> = Vec::new();
    for d in detections {
        match scans.last_mut() {
            Some(scan) if (d.t - scan[0].t).abs() <= tolerance => scan.push(*d),
            _ => scans.push(vec![*d]),
        }
    }
    scans
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;

    fn p() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn radar_roundtrip_is_exact() {
        let dets = vec![
            RadarDetection { t: 0.1, range: 3.25, azimuth: -0.3, elevation: 0.1, range_rate: -0.123456789012345, intensity: 20.0 },
            RadarDetection { t: 0.1 + 1e-17, range: 1.0 / 3.0, azimuth: 1e-7, elevation: -0.2, range_rate: 2.0, intensity: 0.0 },
        ];
        let mut buf = Vec::new();
        write_radar_csv(&mut buf, &dets).unwrap();
        let back = read_radar_csv(buf.as_slice(), p()).unwrap();
        assert_eq!(back, dets);
    }

    #[test]
    fn radar_errors_name_the_line() {
        let text = "t,range,azimuth,elevation,range_rate,intensity\n0.1,2,0,0,1,1\n0.2,abc,0,0,1,1\n";
        match read_radar_csv(text.as_bytes(), p()) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "t,range,azimuth,elevation,range_rate,intensity\n0.2,2,0,0,1,1\n0.1,2,0,0,1,1\n";
        match read_radar_csv(text.as_bytes(), p()) {
            Err(FormatError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(read_radar_csv("a,b\n1,2\n".as_bytes(), p()).is_err());
    }

    #[test]
    fn pose_roundtrip_is_exact() {
        let m = PoseMeasurement {
            t: 1.25,
            pose: Pose::new(exp_so3(&Vector3::new(0.3, -1.1, 2.0)), Vector3::new(0.1, -2.0, 1.0 / 3.0)),
            covariance: Matrix6::from_fn(|i, j| if i == j { 1e-4 * (i + 1) as f64 } else { 1e-7 * (i + j) as f64 }),
        };
        let rec = PoseRecord::from_measurement(&m, true);
        let mut buf = Vec::new();
        write_pose_records(&mut buf, std::slice::from_ref(&rec)).unwrap();
        let back = read_pose_records(buf.as_slice(), p()).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        let mut buf2 = Vec::new();
        write_pose_records(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
        let meas = back[0].to_measurement().unwrap();
        assert!(meas.pose.distance(&m.pose).1 < 1e-15);
        assert_eq!(meas.covariance, m.covariance);
    }

    #[test]
    fn bad_quaternion_names_the_line() {
        let text = "{\"t\":0.0,\"q\":[1,0,0,0],\"r\":[0,0,0]}\n{\"t\":0.1,\"q\":[0.5,0,0,0],\"r\":[0,0,0]}\n";
        match read_pose_jsonl(text.as_bytes(), p()) {
            Err(e @ FormatError::Parse { line: 2, .. }) => assert!(e.to_string().contains(":2:")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_covariance_takes_default() {
        let text = "{\"t\":0.0,\"q\":[1,0,0,0],\"r\":[1,2,3]}\n";
        let m = read_pose_jsonl(text.as_bytes(), p()).unwrap();
        assert_eq!(m[0].covariance, default_pose_covariance());
        assert_eq!(m[0].pose.translation, Vector3::new(1.0, 2.0, 3.0));
        let bad = "{\"t\":0.0,\"q\":[1,0,0,0],\"r\":[1,2,3],\"covariance\":[1,2]}\n";
        assert!(read_pose_jsonl(bad.as_bytes(), p()).is_err());
        let unknown = "{\"t\":0.0,\"q\":[1,0,0,0],\"r\":[1,2,3],\"x\":1}\n";
        assert!(read_pose_jsonl(unknown.as_bytes(), p()).is_err());
    }

    #[test]
    fn velocity_roundtrip_is_exact() {
        let e = VelocityEstimate {
            t: 0.3,
            v: Vector3::new(0.1, -0.2, 1.0 / 7.0),
            covariance: Matrix3::new(1e-3, 1e-5, 2e-5, 1e-5, 2e-3, 3e-5, 2e-5, 3e-5, 3e-3),
            inlier_count: 40,
            total_count: 50,
        };
        let mut buf = Vec::new();
        write_velocity_csv(&mut buf, &[e]).unwrap();
        assert_eq!(read_velocity_csv(buf.as_slice(), p()).unwrap(), vec![e]);
    }

    #[test]
    fn scans_group_within_tolerance() {
        let d = |t| RadarDetection { t, range: 1.0, azimuth: 0.0, elevation: 0.0, range_rate: 0.0, intensity: 0.0 };
        let dets = [d(0.0), d(0.0005), d(0.001), d(0.1), d(0.1), d(0.2)];
        let scans = group_scans(&dets, 1e-3);
        assert_eq!(scans.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![3, 2, 1]);
    }
}
