//! `tumortwin`: calibrate a tumor-growth model to imaging data and forecast
//! clinical quantities with uncertainty.
//!
//! Numerics live in a single JSON config; flags only choose paths,
//! verbosity and the thread count. Every subcommand except
//! `validate-config` writes its artifacts and a `run.json` provenance record
//! to `output_dir`.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 solver failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::RunConfig;

const CONFIG_HELP: &str = "\
CONFIG KEYS (JSON, unknown keys are rejected; relative paths are resolved against the config file):
  output_dir                      directory for artifacts and run.json (required)
  mesh.path                       existing .twmesh file, or
  mesh.extent_mm, mesh.cells      structured box, e.g. [100, 100] and [40, 40]
  mesh.gray_below_x_mm            gray/white split for generated meshes (default: half the extent)
  prior.preset                    upenn-table2 | ivygap-table3, or
  prior.layout, prior.blocks      nodal | gray_white and [{name, mean, variance, rho_mm}, ...]
  therapy.schedule                CSV with columns type (rt|ct), time_days, dose
  therapy.stupp_start_day         standard chemoradiation course instead of a CSV
  therapy.alpha_rt, beta_rt, alpha_ct, beta_ct_rate, rt_gamma, chemo_sampling
  time.t0, time.tf, time.dt       calibration window and step in days
  time.prediction_tf              end of the forecast, which starts at time.tf
  time.prediction_initial         image of the state at time.tf (default: observation at tf)
  time.prediction_background      [low, high] hysteresis thresholds for tumor in that image (default: 1 and 3 noise std)
  observations.manifest           JSON manifest {noise_variance, observations: [{t_days, image}]}, or
  observations.synthesis          virtual-patient scenario generated on the fly
  observations.initial_condition  image of the state at time.t0 (default: observation at t0)
  observations.cadence            daily | weekly | fortnightly subsampling
  observations.noise_variance     overrides the manifest value
  solver.*                        max_newton, grad_rtol, grad_atol, max_cg, armijo_c,
                                  backtrack_factor, max_backtracks, gn_iterations
  laplace.rank, oversample, seed  randomized eigensolver
  qoi.kinds                       [ttc, tv, ccc, dice, rel_err_ttc, rel_err_tv]
  qoi.threshold, qoi.n_samples    tumor threshold (default 0.1) and Monte Carlo size
  qoi.reference_image             measured state at prediction_tf for comparative QoIs
  qoi.reference_ttc, reference_tv reference totals (default: computed from the image)
  seeds.sample                    base pushforward seed; sample i uses seed + i
  scenario                        virtual-patient study definition for synthesize and study

EXIT CODES: 0 success, 1 I/O failure, 2 configuration error, 3 solver failure";

#[derive(Parser, Debug)]
#[command(name = "tumortwin", version, about = "Bayesian digital twin for reaction-diffusion tumor growth", after_help = CONFIG_HELP)]
struct Cli {
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or re-export) the computational mesh. Needs: mesh.
    MeshGen(Args),
    /// Create a virtual patient: noisy image series, seed, and forecast target. Needs: scenario.
    Synthesize(Args),
    /// Compute the MAP estimate. Needs: mesh, prior, time, observations.
    Calibrate(Args),
    /// Build the low-rank Laplace posterior at the stored MAP point. Needs: as calibrate.
    Laplace(Args),
    /// Forecast from the MAP point. Needs: as calibrate plus time.prediction_tf.
    Predict(Args),
    /// Push prior and posterior samples through the forecast. Needs: as predict plus qoi.
    Qoi(Args),
    /// Run the imaging-frequency study end to end. Needs: scenario.
    Study(Args),
    /// Parse and check a config, including referenced files, without computing.
    ValidateConfig(Args),
}

#[derive(clap::Args, Debug)]
struct Args {
    /// JSON run configuration.
    #[arg(short, long)]
    config: PathBuf,

    /// Overrides output_dir from the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
        }
    }

    pub fn from_core(stage: &str, e: tumortwin::Error) -> Self {
        use tumortwin::Error as E;
        let msg = format!("{stage}: {e}");
        match e {
            _ if e.is_solver_failure() => CliError::Solver(msg),
            E::Io(_) | E::Json(_) => CliError::Io(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Solver(m) => write!(f, "solver failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MeshGen(_) => "mesh-gen",
            Command::Synthesize(_) => "synthesize",
            Command::Calibrate(_) => "calibrate",
            Command::Laplace(_) => "laplace",
            Command::Predict(_) => "predict",
            Command::Qoi(_) => "qoi",
            Command::Study(_) => "study",
            Command::ValidateConfig(_) => "validate-config",
        }
    }

    fn args(&self) -> &Args {
        match self {
            Command::MeshGen(a)
            | Command::Synthesize(a)
            | Command::Calibrate(a)
            | Command::Laplace(a)
            | Command::Predict(a)
            | Command::Qoi(a)
            | Command::Study(a)
            | Command::ValidateConfig(a) => a,
        }
    }
}

fn provenance(
    command: &str,
    config_path: &Path,
    cfg: &RunConfig,
    threads: usize,
    wall: f64,
    artifacts: &[String],
) -> Result<(), CliError> {
    let bytes = std::fs::read(config_path).map_err(|e| CliError::Io(e.to_string()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| CliError::Io(e.to_string()))?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()) - wall;
    let record = serde_json::json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config_path": std::fs::canonicalize(config_path).unwrap_or(config_path.to_path_buf()),
        "config_sha256": hex::encode(Sha256::digest(&bytes)),
        "config": raw,
        "resolved_config": cfg,
        "seeds": {
            "sample": cfg.seeds.sample,
            "laplace": cfg.laplace.seed,
            "scenario_noise": cfg.scenario.as_ref().map(|s| s.noise_seed),
            "scenario_sample": cfg.scenario.as_ref().map(|s| s.sample_seed),
            "synthesis_noise": cfg.observations.as_ref().and_then(|o| o.synthesis.as_ref()).map(|s| s.noise_seed),
        },
        "versions": {
            "tumortwin": tumortwin::VERSION,
            "tumortwin-cli": env!("CARGO_PKG_VERSION"),
        },
        "threads": threads,
        "started_unix_s": started,
        "wall_time_s": wall,
        "artifacts": artifacts,
    });
    let text = serde_json::to_string_pretty(&record).map_err(|e| CliError::Io(e.to_string()))?;
    // run.json describes the latest command; the per-command copy keeps a chained pipeline's history
    for name in ["run.json".to_string(), format!("run_{command}.json")] {
        let path = cfg.output_dir.join(name);
        std::fs::write(&path, &text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let args = cli.command.args();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    pool.build_global().map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    let threads = rayon::current_num_threads();

    let start = Instant::now();
    let artifacts = match &cli.command {
        Command::ValidateConfig(_) => {
            println!("{}: ok", args.config.display());
            return Ok(());
        }
        Command::MeshGen(_) => commands::mesh_gen(&cfg)?,
        Command::Synthesize(_) => commands::synthesize(&cfg)?,
        Command::Calibrate(_) => commands::calibrate(&cfg)?,
        Command::Laplace(_) => commands::laplace(&cfg)?,
        Command::Predict(_) => commands::predict(&cfg)?,
        Command::Qoi(_) => commands::qoi(&cfg)?,
        Command::Study(_) => commands::study(&cfg)?,
    };
    let wall = start.elapsed().as_secs_f64();
    provenance(cli.command.name(), &args.config, &cfg, threads, wall, &artifacts)?;
    log::info!("{} finished in {wall:.2} s; artifacts in {}", cli.command.name(), cfg.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tumortwin {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
