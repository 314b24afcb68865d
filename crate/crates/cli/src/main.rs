use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use groundfuse_core::config::{Config, CorrectorKind, SEED_ENV};
use groundfuse_core::eval::{
    estimates_to_poses, evaluate, read_log, read_poses, read_truth, truth_to_poses, write_log, write_spline,
    write_trajectory, write_trajectory_quat, write_truth, Metrics,
};
use groundfuse_core::filter::Counters;
use groundfuse_core::pipeline::{estimate, simulate_config};
use groundfuse_core::spline::SplineDegree;
use groundfuse_core::verify::{run_suite, Suite};
use groundfuse_core::Error;

const VERSION: &str = env!("GROUNDFUSE_VERSION");

const EXIT_CONFIG: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_FILTER: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "groundfuse", version = VERSION, about = "Wheel-inertial odometry on a B-spline ground manifold")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic log, its ground truth and the true ground surface.
    Simulate {
        /// Flat `key = value` config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filter over a log.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth for the oracle corrector and for metrics. Defaults to
        /// `truth.csv` next to the log when that file exists.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_parser = ["passthrough", "oracle", "constant_fit"])]
        corrector: Option<String>,
        /// Disable the manifold update.
        #[arg(long)]
        no_manifold: bool,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
        spline_degree: Option<u32>,
    },
    /// Finite-difference, Monte Carlo and cross-form self-checks.
    Verify {
        /// One of jacobians, covariance, constraints; all when omitted.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// ATE and ARE of an estimate against ground truth.
    Eval {
        est: PathBuf,
        truth: PathBuf,
        /// Rigidly align the estimate first.
        #[arg(long)]
        align: bool,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

/// Exit code for an error raised while reading inputs or writing outputs.
fn io_failure(e: Error) -> Failure {
    let code = match e.root() {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_IO,
    };
    Failure::new(code, e.to_string())
}

fn config_failure(e: Error) -> Failure {
    let code = match e {
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    };
    Failure::new(code, e.to_string())
}

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    let cfg = match path {
        Some(p) => Config::from_file(p).map_err(config_failure)?,
        None => Config::default(),
    };
    let env = std::env::var(SEED_ENV).ok();
    cfg.with_seed_override(env.as_deref()).map_err(config_failure)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct WallClock {
    elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    filter_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    realtime_factor: Option<f64>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    seed_from_env: bool,
    config: &'a Config,
    inputs: BTreeMap<&'a str, String>,
    outputs: BTreeMap<&'a str, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    counters: Option<Counters>,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<Metrics>,
    wall_clock: WallClock,
}

fn write_manifest(dir: &Path, manifest: &RunManifest<'_>) -> Result<(), Failure> {
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Failure::new(EXIT_IO, e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_simulate(config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = load_config(config)?;
    let sim = simulate_config(&cfg).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    create_dir(out)?;
    let files = [
        ("log", out.join("log.csv")),
        ("truth", out.join("truth.csv")),
        ("spline", out.join("spline.txt")),
    ];
    write_log(&files[0].1, &sim.log).map_err(io_failure)?;
    write_truth(&files[1].1, &sim.truth).map_err(io_failure)?;
    write_spline(&files[2].1, &sim.spline).map_err(io_failure)?;

    let mut inputs = BTreeMap::new();
    if let Some(c) = config {
        inputs.insert("config", path_string(c));
    }
    let manifest = RunManifest {
        command: "simulate",
        version: VERSION,
        seed: cfg.seed,
        seed_from_env: std::env::var(SEED_ENV).is_ok(),
        config: &cfg,
        inputs,
        outputs: files.iter().map(|(k, p)| (*k, path_string(p))).collect(),
        counters: None,
        metrics: None,
        wall_clock: WallClock {
            elapsed_s: start.elapsed().as_secs_f64(),
            filter_s: None,
            realtime_factor: None,
        },
    };
    write_manifest(out, &manifest)?;
    println!("samples={} duration_s={:.2}", sim.log.len(), duration(&sim.log));
    println!(
        "{}",
        serde_json::json!({"command": "simulate", "samples": sim.log.len(), "seed": cfg.seed, "out": path_string(out)})
    );
    Ok(())
}

fn duration(log: &[groundfuse_core::models::MeasurementSample]) -> f64 {
    match (log.first(), log.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    config: Option<&Path>,
    log_path: &Path,
    out: &Path,
    truth: Option<&Path>,
    corrector: Option<&str>,
    no_manifold: bool,
    spline_degree: Option<u32>,
) -> Result<(), Failure> {
    let start = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(c) = corrector {
        cfg.corrector = CorrectorKind::parse(c).ok_or_else(|| Failure::new(EXIT_CONFIG, format!("unknown corrector `{c}`")))?;
    }
    if no_manifold {
        cfg.filter.manifold = false;
    }
    if let Some(d) = spline_degree {
        cfg.filter.degree = SplineDegree::from_degree(d).map_err(config_failure)?;
    }

    let log = read_log(log_path).map_err(io_failure)?;
    let truth_path = match truth {
        Some(p) => Some(p.to_path_buf()),
        None => log_path
            .parent()
            .map(|d| d.join("truth.csv"))
            .filter(|p| p.is_file()),
    };
    let truth = match &truth_path {
        Some(p) => Some(read_truth(p).map_err(io_failure)?),
        None => None,
    };

    let t0 = Instant::now();
    let result = estimate(&cfg, &log, truth.as_deref()).map_err(|e| match e.root() {
        Error::Config(_) => Failure::new(EXIT_CONFIG, e.to_string()),
        Error::Uncalibrated | Error::EmptyWindow if cfg.corrector == CorrectorKind::ConstantFit => {
            Failure::new(EXIT_CONFIG, e.to_string())
        }
        _ => Failure::new(EXIT_FILTER, e.to_string()),
    })?;
    let filter_s = t0.elapsed().as_secs_f64();
    let rtf = duration(&log) / filter_s.max(1e-12);

    create_dir(out)?;
    let files = [
        ("trajectory", out.join("trajectory.csv")),
        ("trajectory_quat", out.join("trajectory_quat.csv")),
        ("spline", out.join("spline.txt")),
    ];
    write_trajectory(&files[0].1, &result.estimates).map_err(io_failure)?;
    write_trajectory_quat(&files[1].1, &result.estimates).map_err(io_failure)?;
    write_spline(&files[2].1, &result.spline).map_err(io_failure)?;

    let metrics = match &truth {
        Some(t) => {
            let est = estimates_to_poses(&result.estimates).map_err(|e| Failure::new(EXIT_FILTER, e.to_string()))?;
            let gt = truth_to_poses(t).map_err(io_failure)?;
            Some(evaluate(&est, &gt, false).map_err(|e| Failure::new(EXIT_FILTER, e.to_string()))?)
        }
        None => None,
    };

    let mut inputs = BTreeMap::new();
    if let Some(c) = config {
        inputs.insert("config", path_string(c));
    }
    inputs.insert("log", path_string(log_path));
    if let Some(t) = &truth_path {
        inputs.insert("truth", path_string(t));
    }
    let manifest = RunManifest {
        command: "run",
        version: VERSION,
        seed: cfg.seed,
        seed_from_env: std::env::var(SEED_ENV).is_ok(),
        config: &cfg,
        inputs,
        outputs: files.iter().map(|(k, p)| (*k, path_string(p))).collect(),
        counters: Some(result.counters),
        metrics,
        wall_clock: WallClock {
            elapsed_s: start.elapsed().as_secs_f64(),
            filter_s: Some(filter_s),
            realtime_factor: Some(rtf),
        },
    };
    write_manifest(out, &manifest)?;

    if let Some(m) = metrics {
        println!("ate_m={:.6} are_deg={:.6}", m.ate_m, m.are_deg);
    }
    println!("realtime_factor={rtf:.1}");
    let mut summary = serde_json::json!({
        "command": "run",
        "corrector": cfg.corrector.name(),
        "manifold": cfg.filter.manifold,
        "spline_degree": cfg.filter.degree.degree(),
        "samples": log.len(),
        "realtime_factor": rtf,
        "counters": result.counters,
    });
    if let Some(m) = metrics {
        summary["ate_m"] = m.ate_m.into();
        summary["are_deg"] = m.are_deg.into();
    }
    println!("{summary}");
    Ok(())
}

fn cmd_verify(suite: Option<&str>, seed: u64) -> Result<(), Failure> {
    let suites = match suite {
        Some(s) => vec![s.parse::<Suite>().map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?],
        None => Suite::ALL.to_vec(),
    };
    let mut first_failure = None;
    for s in suites {
        for check in run_suite(s, seed) {
            println!("{}: {check}", s.name());
            println!(
                "{}",
                serde_json::json!({
                    "suite": s.name(),
                    "check": check.name,
                    "cases": check.cases,
                    "max_error": check.max_error,
                    "tolerance": check.tolerance,
                    "passed": check.passed,
                })
            );
            if !check.passed && first_failure.is_none() {
                first_failure = Some(format!("{}/{}", s.name(), check.name));
            }
        }
    }
    match first_failure {
        Some(name) => Err(Failure::new(EXIT_VERIFY, format!("check failed: {name}"))),
        None => Ok(()),
    }
}

fn cmd_eval(est: &Path, truth: &Path, align: bool) -> Result<(), Failure> {
    let a = read_poses(est).map_err(io_failure)?;
    let b = read_poses(truth).map_err(io_failure)?;
    let m = evaluate(&a, &b, align).map_err(io_failure)?;
    println!("ate_m={:.6} are_deg={:.6}", m.ate_m, m.are_deg);
    println!(
        "{}",
        serde_json::json!({"command": "eval", "ate_m": m.ate_m, "are_deg": m.are_deg, "pairs": m.pairs, "aligned": align})
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out } => cmd_simulate(config.as_deref(), out),
        Command::Run {
            config,
            log,
            out,
            truth,
            corrector,
            no_manifold,
            spline_degree,
        } => cmd_run(
            config.as_deref(),
            log,
            out,
            truth.as_deref(),
            corrector.as_deref(),
            *no_manifold,
            *spline_degree,
        ),
        Command::Verify { suite, seed } => cmd_verify(suite.as_deref(), *seed),
        Command::Eval { est, truth, align } => cmd_eval(est, truth, *align),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
