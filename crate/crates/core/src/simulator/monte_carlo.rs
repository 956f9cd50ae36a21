//! Repeated simulate → estimate → calibrate runs over a grid of noise levels.

use std::io::Write;
use std::time::Instant;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{simulate_dataset, SimConfig, SimError, VelocityMode};
use crate::calibration::{calibrate, ProblemOptions, VelocityNoise};
use crate::optimizer::LmParams;
use crate::radar::MlesacParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCombo {
    pub name: String,
    /// Per-axis radar ego-velocity noise (m/s), direct mode; in scan mode the
    /// first component is used as the range-rate noise.
    pub velocity_sigma: Vector3<f64>,
    pub pixel_noise: f64,
}

/// Nominal radar noise of (0.03, 0.06, 0.1) m/s scaled by 0.5, 1 and 2, each
/// with 1 px image noise.
pub fn default_noise_grid() -> Vec<NoiseCombo> {
    let nominal = Vector3::new(0.03, 0.06, 0.1);
    [("half", 0.5), ("nominal", 1.0), ("double", 2.0)]
        .into_iter()
        .map(|(name, s)| NoiseCombo { name: name.to_string(), velocity_sigma: nominal * s, pixel_noise: 1.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub base: SimConfig,
    pub combos: Vec<NoiseCombo>,
    pub trials: usize,
    pub master_seed: u64,
    pub problem: ProblemOptions,
    pub lm: LmParams,
    pub mlesac: MlesacParams,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        let mut base = SimConfig::default();
        base.radar.mode = VelocityMode::Direct;
        Self {
            base,
            combos: default_noise_grid(),
            trials: 50,
            master_seed: 0,
            problem: ProblemOptions::default(),
            lm: LmParams::default(),
            mlesac: MlesacParams::default(),
        }
    }
}

/// Seed of trial `trial`. Every noise combination reuses the same trial
/// seeds, so combinations differ only in noise magnitude.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ (trial as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub combo: String,
    pub trial: usize,
    pub translation_error_m: f64,
    pub rotation_error_deg: f64,
    pub converged: bool,
    /// Square root of the trace of the estimated translation covariance.
    pub predicted_translation_sigma_m: f64,
    pub predicted_rotation_sigma_deg: f64,
    pub iterations: usize,
    pub runtime_s: f64,
    pub error: Option<String>,
}

impl TrialResult {
    fn failed(combo: &str, trial: usize, msg: String, runtime_s: f64) -> Self {
        Self {
            combo: combo.to_string(),
            trial,
            translation_error_m: f64::NAN,
            rotation_error_deg: f64::NAN,
            converged: false,
            predicted_translation_sigma_m: f64::NAN,
            predicted_rotation_sigma_deg: f64::NAN,
            iterations: 0,
            runtime_s,
            error: Some(msg),
        }
    }
}

/// Applies a noise combination to a simulator configuration.
pub fn apply_combo(base: &SimConfig, combo: &NoiseCombo, seed: u64) -> SimConfig {
    let mut cfg = *base;
    cfg.seed = seed;
    cfg.camera.pixel_noise = combo.pixel_noise;
    match cfg.radar.mode {
        VelocityMode::Direct => cfg.radar.velocity_sigma = combo.velocity_sigma,
        VelocityMode::Scans => cfg.radar.range_rate_sigma = combo.velocity_sigma.x,
    }
    cfg
}

/// One end-to-end run. Failures are captured in the result.
pub fn run_trial(cfg: &MonteCarloConfig, combo: &NoiseCombo, trial: usize) -> TrialResult {
    let start = Instant::now();
    let seed = trial_seed(cfg.master_seed, trial);
    let sim = apply_combo(&cfg.base, combo, seed);
    let dataset = match simulate_dataset(&sim) {
        Ok(d) => d,
        Err(e) => return TrialResult::failed(&combo.name, trial, e.to_string(), start.elapsed().as_secs_f64()),
    };
    let mut options = cfg.problem;
    let sigma = combo.velocity_sigma;
    if sim.radar.mode == VelocityMode::Direct && sigma.iter().all(|s| *s > 0.0) {
        options.velocity_noise = VelocityNoise::Constant { sigma };
    }
    let velocities = dataset.velocity_estimates(&cfg.mlesac, seed);
    match calibrate(velocities, dataset.pose_measurements, options, &cfg.lm) {
        Ok((_, sol)) => {
            let (dt, dr) = sol.extrinsics.error_to(&dataset.truth.extrinsics);
            let (pt, pr) = sol
                .extrinsic_covariance
                .map(|c| {
                    let rot = (c[(0, 0)] + c[(1, 1)] + c[(2, 2)]).sqrt();
                    let trans = (c[(3, 3)] + c[(4, 4)] + c[(5, 5)]).sqrt();
                    (trans, rot.to_degrees())
                })
                .unwrap_or((f64::NAN, f64::NAN));
            TrialResult {
                combo: combo.name.clone(),
                trial,
                translation_error_m: dt,
                rotation_error_deg: dr.to_degrees(),
                converged: sol.report.converged,
                predicted_translation_sigma_m: pt,
                predicted_rotation_sigma_deg: pr,
                iterations: sol.report.iterations,
                runtime_s: start.elapsed().as_secs_f64(),
                error: None,
            }
        }
        Err(e) => TrialResult::failed(&combo.name, trial, e.to_string(), start.elapsed().as_secs_f64()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub results: Vec<TrialResult>,
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboSummary {
    pub combo: String,
    pub trials: usize,
    pub converged: usize,
    pub median_translation_error_m: f64,
    pub median_rotation_error_deg: f64,
    pub median_predicted_translation_sigma_m: f64,
    pub median_predicted_rotation_sigma_deg: f64,
}

impl MonteCarloResult {
    pub fn for_combo<'a>(&'a self, combo: &'a str) -> impl Iterator<Item = &'a TrialResult> + 'a {
        self.results.iter().filter(move |r| r.combo == combo)
    }

    pub fn summary(&self, combos: &[NoiseCombo]) -> Vec<ComboSummary> {
        combos
            .iter()
            .map(|c| {
                let rs: Vec<&TrialResult> = self.for_combo(&c.name).collect();
                let col = |f: fn(&TrialResult) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
                ComboSummary {
                    combo: c.name.clone(),
                    trials: rs.len(),
                    converged: rs.iter().filter(|r| r.converged).count(),
                    median_translation_error_m: col(|r| r.translation_error_m),
                    median_rotation_error_deg: col(|r| r.rotation_error_deg),
                    median_predicted_translation_sigma_m: col(|r| r.predicted_translation_sigma_m),
                    median_predicted_rotation_sigma_deg: col(|r| r.predicted_rotation_sigma_deg),
                }
            })
            .collect()
    }

    /// Histogram data: one row per trial.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["noise_combo", "trial", "translation_error_m", "rotation_error_deg"])?;
        for r in &self.results {
            w.write_record([
                r.combo.clone(),
                r.trial.to_string(),
                r.translation_error_m.to_string(),
                r.rotation_error_deg.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every trial of every combination in parallel.
pub fn run_monte_carlo(cfg: &MonteCarloConfig) -> Result<MonteCarloResult, SimError> {
    if cfg.trials == 0 {
        return Err(SimError::InvalidConfig("trials must be at least 1".into()));
    }
    if cfg.combos.is_empty() {
        return Err(SimError::InvalidConfig("noise grid is empty".into()));
    }
    cfg.base.validate()?;
    let jobs: Vec<(&NoiseCombo, usize)> = cfg.combos.iter().flat_map(|c| (0..cfg.trials).map(move |t| (c, t))).collect();
    let results = jobs.par_iter().map(|(c, t)| run_trial(cfg, c, *t)).collect();
    Ok(MonteCarloResult { results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn trial_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|t| trial_seed(42, t)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(trial_seed(42, 3), trial_seed(42, 3));
        assert_ne!(trial_seed(42, 3), trial_seed(43, 3));
    }

    #[test]
    fn grid_doubles() {
        let g = default_noise_grid();
        assert_eq!(g.len(), 3);
        assert_eq!(g[2].velocity_sigma, g[1].velocity_sigma * 2.0);
        assert_eq!(g[1].velocity_sigma, Vector3::new(0.03, 0.06, 0.1));
    }

    #[test]
    fn csv_layout() {
        let res = MonteCarloResult {
            results: vec![TrialResult::failed("nominal", 0, "x".into(), 0.0), TrialResult {
                translation_error_m: 0.01,
                rotation_error_deg: 0.5,
                ..TrialResult::failed("double", 1, String::new(), 0.0)
            }],
        };
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "noise_combo,trial,translation_error_m,rotation_error_deg");
        assert_eq!(lines[1], "nominal,0,NaN,NaN");
        assert_eq!(lines[2], "double,1,0.01,0.5");
    }

    #[test]
    fn rejects_empty_runs() {
        let cfg = MonteCarloConfig { trials: 0, ..MonteCarloConfig::default() };
        assert!(run_monte_carlo(&cfg).is_err());
    }
}
