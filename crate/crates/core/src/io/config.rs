//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{ProblemOptions, ScaleMode, VelocityNoise};
use crate::observability::ExcitationThresholds;
use crate::optimizer::LmParams;
use crate::radar::MlesacParams;
use crate::simulator::SimConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Scan grouping tolerance (s).
pub const SCAN_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineSettings {
    pub order: usize,
    /// Knot spacing (s).
    pub knot_spacing: f64,
}

impl Default for SplineSettings {
    fn default() -> Self {
        Self { order: 4, knot_spacing: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Added to every radar timestamp before use (s).
    pub time_offset: f64,
    pub scale_mode: ScaleMode,
    pub spline: SplineSettings,
    pub mlesac: MlesacParams,
    pub lm: LmParams,
    pub velocity_noise: VelocityNoise,
    pub excitation: ExcitationThresholds,
    pub simulation: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            time_offset: 0.0,
            scale_mode: ScaleMode::Fixed,
            spline: SplineSettings::default(),
            mlesac: MlesacParams::default(),
            lm: LmParams::default(),
            velocity_noise: VelocityNoise::default(),
            excitation: ExcitationThresholds::default(),
            simulation: SimConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.spline.order < 2 || !(self.spline.knot_spacing > 0.0) {
            return bad("spline needs order ≥ 2 and positive knot spacing".into());
        }
        if !self.time_offset.is_finite() {
            return bad("time_offset must be finite".into());
        }
        self.mlesac.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.lm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.velocity_noise {
            VelocityNoise::PerScan { floor } if floor.iter().any(|x| !(*x >= 0.0)) => {
                return bad("velocity noise floor must be nonnegative".into())
            }
            VelocityNoise::Constant { sigma } if sigma.iter().any(|x| !(*x > 0.0)) => {
                return bad("constant velocity sigma must be positive".into())
            }
            _ => {}
        }
        let ex = &self.excitation;
        if !(ex.collinearity > 0.0 && ex.rank_tolerance > 0.0 && ex.num_samples >= 2) {
            return bad("excitation thresholds must be positive with at least 2 samples".into());
        }
        self.simulation.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn problem_options(&self) -> ProblemOptions {
        ProblemOptions {
            spline_order: self.spline.order,
            knot_spacing: self.spline.knot_spacing,
            scale_mode: self.scale_mode,
            velocity_noise: self.velocity_noise,
            time_offset: self.time_offset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("schema_version = 1\nscale_mode = \"estimated\"\n[spline]\nknot_spacing = 0.05\n").unwrap();
        assert_eq!(cfg.scale_mode, ScaleMode::Estimated);
        assert_eq!(cfg.spline.knot_spacing, 0.05);
        assert_eq!(cfg.spline.order, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("schema_version = 1\nbogus = 3\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[lm]\nmax_iters = 3\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn wrong_schema_is_rejected() {
        assert!(matches!(RunConfig::from_toml("schema_version = 2\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn velocity_noise_variants_parse() {
        let cfg = RunConfig::from_toml("[velocity_noise]\nkind = \"constant\"\nsigma = [0.03, 0.06, 0.1]\n").unwrap();
        assert!(matches!(cfg.velocity_noise, VelocityNoise::Constant { .. }));
        assert!(RunConfig::from_toml("[velocity_noise]\nkind = \"constant\"\nsigma = [0.0, 0.06, 0.1]\n").is_err());
    }
}
