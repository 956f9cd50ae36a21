//! `radcal`: radar-to-camera extrinsic calibration from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use radcal::calibration::{solve_calibration, ScaleMode};
use radcal::io::formats::{load_pose_jsonl, load_radar_csv, load_velocity_csv, save_pose_jsonl, save_radar_csv, save_velocity_csv};
use radcal::io::{
    estimate_velocities, ingest_data, ingest_velocities, problem_excitation, render_summary, CalibrationReport,
    ExtrinsicsRecord, GroundTruthRecord, Ingested, InputSummary, RunConfig,
};
use radcal::observability::Verdict;
use radcal::simulator::monte_carlo::{run_monte_carlo, MonteCarloConfig};
use radcal::simulator::{simulate_dataset, VelocityMode};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "radcal", version, about = "Radar-to-camera extrinsic calibration")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic dataset (radar log, pose log, ground truth) to a directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimates one ego-velocity per radar scan.
    Velocity {
        #[arg(long)]
        radar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the full calibration and writes a report.
    Calibrate {
        #[command(flatten)]
        input: InputArgs,
        /// Report path (JSON); printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Calibrate even when the excitation check says degenerate.
        #[arg(long)]
        force: bool,
        #[arg(long, value_enum)]
        scale_mode: Option<ScaleArg>,
    },
    /// Audits whether the recorded motion excites every extrinsic parameter.
    CheckExcitation {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        scale_mode: Option<ScaleArg>,
    },
    /// Renders a calibration report as text.
    Report {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the simulation study over the noise grid and writes per-trial errors as CSV.
    MonteCarlo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
}

#[derive(Args, Debug)]
struct InputArgs {
    /// Radar detection log (CSV).
    #[arg(long, required_unless_present = "velocities", conflicts_with = "velocities")]
    radar: Option<PathBuf>,
    /// Per-scan velocity estimates (CSV) instead of raw detections.
    #[arg(long)]
    velocities: Option<PathBuf>,
    /// Camera pose log (JSON Lines).
    #[arg(long)]
    poses: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ScaleArg {
    Fixed,
    Estimated,
}

impl From<ScaleArg> for ScaleMode {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Fixed => ScaleMode::Fixed,
            ScaleArg::Estimated => ScaleMode::Estimated,
        }
    }
}

/// Error tagged with the process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

fn data(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_DATA, error }
}

fn main() -> ExitCode {
    env_logger::Builder::from_default_env().filter_level(log::LevelFilter::Warn).parse_default_env().init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(e.into()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.simulation.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Simulate { out } => simulate(&cfg, out).map_err(data),
        Command::Velocity { radar, out } => velocity(&cfg, radar, out).map_err(data),
        Command::Calibrate { input, out, force, scale_mode } => {
            if let Some(s) = scale_mode {
                cfg.scale_mode = (*s).into();
            }
            calibrate(&cfg, input, out.as_deref(), *force)
        }
        Command::CheckExcitation { input, out, scale_mode } => {
            if let Some(s) = scale_mode {
                cfg.scale_mode = (*s).into();
            }
            check(&cfg, input, out.as_deref()).map_err(data)
        }
        Command::Report { report, out } => render(report, out.as_deref()).map_err(data),
        Command::MonteCarlo { out, trials } => monte_carlo(&cfg, out, *trials).map_err(data),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<u8> {
    let ds = simulate_dataset(&cfg.simulation)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cfg.simulation.radar.mode {
        VelocityMode::Scans => {
            let detections: Vec<_> = ds.radar_scans.iter().flatten().copied().collect();
            save_radar_csv(&out.join("radar.csv"), &detections)?;
        }
        VelocityMode::Direct => save_velocity_csv(&out.join("velocities.csv"), &ds.direct_velocities)?,
    }
    save_pose_jsonl(&out.join("poses.jsonl"), &ds.pose_measurements)?;
    let truth = GroundTruthRecord { extrinsics: ExtrinsicsRecord::from(&ds.truth.extrinsics), simulation: cfg.simulation };
    write_text(&out.join("ground_truth.json"), &serde_json::to_string_pretty(&truth)?)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    println!(
        "wrote {} radar scans and {} poses to {}",
        ds.truth.radar_samples.len(),
        ds.pose_measurements.len(),
        out.display()
    );
    Ok(0)
}

fn velocity(cfg: &RunConfig, radar: &Path, out: &Path) -> Result<u8> {
    let detections = load_radar_csv(radar)?;
    let batch = estimate_velocities(&detections, cfg);
    if batch.estimates.is_empty() {
        bail!("velocity estimation failed for all {} scans", batch.num_scans);
    }
    save_velocity_csv(out, &batch.estimates)?;
    if batch.failed_scans > 0 {
        log::warn!("{} of {} scans failed", batch.failed_scans, batch.num_scans);
    }
    println!("wrote {} velocity estimates to {}", batch.estimates.len(), out.display());
    Ok(0)
}

fn load_inputs(cfg: &RunConfig, input: &InputArgs) -> Result<Ingested> {
    let poses = load_pose_jsonl(&input.poses)?;
    let ingested = match (&input.radar, &input.velocities) {
        (Some(radar), _) => ingest_data(&load_radar_csv(radar)?, poses, cfg)?,
        (None, Some(v)) => ingest_velocities(load_velocity_csv(v)?, poses, cfg)?,
        (None, None) => bail!("either --radar or --velocities is required"),
    };
    Ok(ingested)
}

fn calibrate(cfg: &RunConfig, input: &InputArgs, out: Option<&Path>, force: bool) -> Result<u8, Failure> {
    let ingested = load_inputs(cfg, input).map_err(data)?;
    let problem = &ingested.problem;
    let mut warnings = Vec::new();
    let pre = problem_excitation(problem, cfg).map_err(|e| data(e.into()))?;
    match pre.verdict {
        Verdict::Degenerate if !force => {
            return Err(data(anyhow::anyhow!(
                "motion is degenerate for calibration ({}); rerun with --force to calibrate anyway",
                pre.worst_constraint
            )))
        }
        Verdict::Degenerate => warnings.push(format!("degenerate excitation ignored (--force): {}", pre.worst_constraint)),
        Verdict::Marginal => warnings.push(format!("marginal excitation: {}", pre.worst_constraint)),
        Verdict::Observable => {}
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let solution = solve_calibration(problem, &cfg.lm).map_err(|e| data(e.into()))?;
    let mut solved = problem.clone();
    solved.trajectory = solution.trajectory.clone();
    solved.extrinsics = solution.extrinsics;
    solved.scale = solution.scale;
    let excitation = problem_excitation(&solved, cfg).map_err(|e| data(e.into()))?;
    if !solution.report.converged {
        warnings.push(format!("solver did not converge ({:?})", solution.report.termination_reason));
    }

    let inputs = InputSummary {
        radar: input.radar.as_ref().or(input.velocities.as_ref()).map(|p| p.display().to_string()),
        poses: Some(input.poses.display().to_string()),
        num_detections: ingested.num_detections,
        num_scans: ingested.num_scans,
        failed_scans: ingested.failed_scans,
        num_velocities: problem.velocity_measurements.len(),
        dropped_velocities: ingested.dropped_velocities,
        num_poses: problem.pose_measurements.len(),
    };
    let report = CalibrationReport::new(cfg, inputs, &solution, excitation, warnings);
    match out {
        Some(path) => {
            write_text(path, &report.to_json()).map_err(data)?;
            print!("{}", render_summary(&report));
        }
        None => println!("{}", report.to_json()),
    }
    if !solution.report.converged {
        eprintln!("error: calibration did not converge");
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn check(cfg: &RunConfig, input: &InputArgs, out: Option<&Path>) -> Result<u8> {
    let ingested = load_inputs(cfg, input)?;
    let report = problem_excitation(&ingested.problem, cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => write_text(path, &json)?,
        None => println!("{json}"),
    }
    eprintln!("excitation verdict: {} ({})", report.verdict, report.worst_constraint);
    if report.verdict != Verdict::Observable {
        log::warn!("motion is {} for calibration: {}", report.verdict, report.worst_constraint);
    }
    Ok(0)
}

fn render(path: &Path, out: Option<&Path>) -> Result<u8> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let report = CalibrationReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let summary = render_summary(&report);
    match out {
        Some(p) => write_text(p, &summary)?,
        None => print!("{summary}"),
    }
    Ok(0)
}

fn monte_carlo(cfg: &RunConfig, out: &Path, trials: usize) -> Result<u8> {
    let mut base = cfg.simulation;
    base.radar.mode = VelocityMode::Direct;
    let mc = MonteCarloConfig {
        base,
        trials,
        master_seed: cfg.seed,
        problem: cfg.problem_options(),
        lm: cfg.lm,
        mlesac: cfg.mlesac,
        ..MonteCarloConfig::default()
    };
    let result = run_monte_carlo(&mc)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    result.write_csv(file)?;
    for s in result.summary(&mc.combos) {
        println!(
            "{:<8} converged {}/{}  median error {:.4} m, {:.4} deg",
            s.combo, s.converged, s.trials, s.median_translation_error_m, s.median_rotation_error_deg
        );
    }
    Ok(0)
}
