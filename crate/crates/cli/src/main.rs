//! `carm-sim`: scene simulation, calibration, positioning, virtual test runs
//! and evaluation from the command line.

mod commands;
mod config;
mod error;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgAction, Parser, Subcommand};
use log::LevelFilter;

use config::{RunConfig, CONFIG_ENV};
use error::{usage, CliResult};
use records::Layout;

#[derive(Debug, Parser)]
#[command(name = "carm-sim", version, about = "Vision-guided C-arm positioning and collision-check simulator")]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Scene seed (overrides scene.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scene preset (overrides scene.preset).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Positioning frames (overrides scene.frames).
    #[arg(long, global = true)]
    frames: Option<u64>,
    /// Worker threads, 0 for one per core (overrides output.threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More logging; repeat for more.
    #[arg(short, long, global = true, action = ArgAction::Count, conflicts_with = "quiet")]
    verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve camera extrinsics from marker correspondences.
    Calibrate {
        /// Marker observation file (default: <out>/markers.json).
        #[arg(long)]
        markers: Option<PathBuf>,
        /// Rig file to write (default: <out>/rig.json).
        #[arg(long)]
        rig_out: Option<PathBuf>,
    },
    /// Generate a scene and write markers, detections, ground truth and depth frames.
    Simulate,
    /// Run per-frame positioning and write keypoints, body parameters and a report.
    Position {
        /// Calibrated rig; calibrates from simulated markers when absent.
        #[arg(long)]
        rig: Option<PathBuf>,
    },
    /// Run the virtual test run over the scene's trajectory.
    Vtr,
    /// Score the outputs in a run directory against ground truth.
    Evaluate {
        /// Run directory (default: the output directory).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Ground-truth stream (default: <run>/ground_truth.jsonl).
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// simulate, calibrate, position, vtr and evaluate in sequence.
    All,
    /// Print the resolved configuration as TOML.
    Config,
}

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) if !path.is_file() => return Err(usage(format!("config file not found: {}", path.display()))),
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.scene.seed = s;
    }
    if let Some(p) = &cli.preset {
        cfg.scene.preset = p.clone();
    }
    if let Some(f) = cli.frames {
        cfg.scene.frames = f;
    }
    if let Some(t) = cli.threads {
        cfg.output.threads = t;
    }
    cfg.validate().map_err(|e| usage(format!("{e:#}")))?;
    Ok(cfg)
}

fn init_logging(cli: &Cli, cfg: &RunConfig) {
    let base = LevelFilter::from_str(&cfg.output.verbosity).unwrap_or(LevelFilter::Info);
    let level = if cli.quiet {
        LevelFilter::Error
    } else {
        LevelFilter::iter().nth(base as usize + cli.verbose as usize).unwrap_or(LevelFilter::Trace)
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    if let Command::Config = cli.command {
        let text = toml::to_string_pretty(&cfg).map_err(|e| error::pipeline(format!("cannot serialize config: {e}")))?;
        print!("{text}");
        return Ok(());
    }
    init_logging(cli, &cfg);
    if cfg.output.threads > 0 && !carm_core::par::configure_threads(cfg.output.threads) {
        log::warn!("thread count not applied");
    }
    std::fs::create_dir_all(&cfg.output.dir)
        .map_err(|e| usage(format!("cannot create output directory {}: {e}", cfg.output.dir.display())))?;
    let out = Layout(cfg.output.dir.clone());
    match &cli.command {
        Command::Calibrate { markers, rig_out } => {
            let markers = markers.clone().unwrap_or_else(|| out.markers());
            let rig_out = rig_out.clone().unwrap_or_else(|| out.rig());
            commands::calibrate(&markers, &rig_out, cfg.calibration.robust).map(drop)
        }
        Command::Simulate => commands::simulate(&cfg),
        Command::Position { rig } => commands::position(&cfg, rig.as_deref()).map(drop),
        Command::Vtr => commands::vtr(&cfg).map(drop),
        Command::Evaluate { run, ground_truth } => {
            let dir = run.clone().unwrap_or_else(|| out.0.clone());
            commands::evaluate(&dir, ground_truth.as_deref()).map(drop)
        }
        Command::All => commands::all(&cfg),
        Command::Config => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind as u8)
        }
    }
}
