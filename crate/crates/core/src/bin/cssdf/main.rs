mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cssdf::Error;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "cssdf", version, about = "Configuration-space distance fields: data, training, planning and MPC")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `planar`, `panda`, or a robot description JSON file.
    #[arg(long, global = true)]
    robot: Option<String>,
    /// Scene JSON file.
    #[arg(long, global = true)]
    scene: Option<PathBuf>,
    /// Dataset file.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "CSSDF_WORKERS")]
    workers: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-collision dataset with boundary mining and class balancing.
    GenSelf {
        /// Also write the samples as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Robot-point dataset from spatial hashing.
    GenExternal {
        #[arg(long)]
        csv: bool,
    },
    /// Train a field model on `--data`.
    Train {
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Accuracy of `--model` (or the grid oracle) on `--data`.
    Eval {
        /// Reference values: the dataset labels or the grid oracle.
        #[arg(long, value_enum, default_value = "dataset")]
        truth: commands::Truth,
        /// Use the grid oracle as the predictor instead of `--model`.
        #[arg(long)]
        oracle: bool,
        /// Grid cells per joint for the oracle.
        #[arg(long, default_value_t = 201)]
        cells: usize,
    },
    /// Plan one query, or run the seeded planning table.
    Plan {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        start: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        goal: Option<Vec<f64>>,
        /// Run the planning comparison over generated scenes.
        #[arg(long)]
        table: bool,
    },
    /// Simulate the safety-filtered MPC.
    Mpc {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        start: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        goal: Option<Vec<f64>>,
        /// Generate a moving-obstacle episode from this seed instead of `--scene`.
        #[arg(long)]
        episode_seed: Option<u64>,
        /// Also rerun the episode at each of these horizons.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
    /// Batched inference latency over query scales.
    BenchLatency,
    /// Data and loss ablation on the planar arm.
    Ablate,
    /// Line chart from a CSV: first column x, remaining numeric columns as series.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "plot.svg")]
        output: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        log_x: bool,
        #[arg(long)]
        log_y: bool,
    },
}

/// Process exit code for each error category.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 4,
        Error::Format(_) => 5,
        Error::Version { .. } => 6,
        Error::Diverged { .. } => 7,
        Error::PlanningFailed(_) | Error::Optimization(_) => 8,
        Error::InvalidInput(_)
        | Error::DimensionMismatch { .. }
        | Error::Range { .. }
        | Error::Schema(_)
        | Error::ClassMissing(_)
        | Error::OutOfBounds(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> cssdf::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&cli.overrides);
    if let Some(r) = &cli.robot {
        cfg.robot = r.clone();
    }
    if cli.scene.is_some() {
        cfg.inputs.scene = cli.scene.clone();
    }
    if cli.data.is_some() {
        cfg.inputs.data = cli.data.clone();
    }
    if cli.model.is_some() {
        cfg.inputs.model = cli.model.clone();
    }
    cfg.inputs.check()?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidInput("--workers must be at least 1".into()));
        }
        // Fails only if a pool already exists; the existing pool is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| io_at(&cli.out, e))?;
    commands::write(&cli.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    commands::dispatch(&cli.command, &cfg, &cli.out)
}

pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
