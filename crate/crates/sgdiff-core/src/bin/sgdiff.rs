//! Experiment driver: schedule search, calibration, rank allocation, the 1D
//! reproduction pipeline, and pass/MAC benchmarking, all from one config
//! file with dotted-key overrides.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgdiff_core::config::{apply_overrides, ExperimentConfig};
use sgdiff_core::error::Error;
use sgdiff_core::exp;

#[derive(Parser)]
#[command(name = "sgdiff", version, about = "Sparse-guidance diffusion sampling testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory root.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-key config overrides, e.g. --set grid.steps=25.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample with a constant or file-loaded guidance schedule.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Guidance schedule JSON produced by optimize-schedule.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Stage-1 evolutionary search for a sparse guidance schedule.
    OptimizeSchedule {
        #[command(flatten)]
        common: Common,
    },
    /// Fit per-layer calibration matrices from full-compute runs.
    FitCalibration {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Stage-2 coordinate-descent search over region calibration ranks.
    OptimizeRanks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
    /// Four-pipeline 1D reproduction with histograms and pass counts.
    ReproFig2 {
        #[command(flatten)]
        common: Common,
    },
    /// Pass/MAC accounting across pipeline variants.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut table: toml::Table = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            text.parse()
                .map_err(|e| Error::Config(format!("config parse error: {e}")))?
        }
        None => toml::Table::new(),
    };
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(workers) = common.workers {
        overrides.push(("workers".into(), workers.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.push(("out_dir".into(), format!("{:?}", out.display().to_string())));
    }
    apply_overrides(&mut table, &overrides)?;
    ExperimentConfig::from_table(table)
}

type StageAction = Box<dyn FnOnce(&ExperimentConfig) -> Result<sgdiff_core::report::ExperimentReport, Error>>;

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let (common, action): (&Common, StageAction) =
        match &cli.command {
            Command::Sample { common, schedule } => {
                let schedule = schedule.clone();
                (common, Box::new(move |cfg| exp::run_sample(cfg, schedule.as_deref())))
            }
            Command::OptimizeSchedule { common } => {
                (common, Box::new(exp::run_optimize_schedule))
            }
            Command::FitCalibration { common, schedule } => {
                let schedule = schedule.clone();
                (common, Box::new(move |cfg| exp::run_fit_calibration(cfg, schedule.as_deref())))
            }
            Command::OptimizeRanks { common, schedule, bank } => {
                let (schedule, bank) = (schedule.clone(), bank.clone());
                (common, Box::new(move |cfg| exp::run_optimize_ranks(cfg, &schedule, &bank)))
            }
            Command::ReproFig2 { common } => (common, Box::new(exp::run_repro_fig2)),
            Command::Bench { common, schedule, bank, ranks } => {
                let (schedule, bank, ranks) = (schedule.clone(), bank.clone(), ranks.clone());
                (
                    common,
                    Box::new(move |cfg| {
                        exp::run_bench(cfg, schedule.as_deref(), bank.as_deref(), ranks.as_deref())
                    }),
                )
            }
        };
    let cfg = load_config(common)?;
    exp::install_workers(cfg.workers);
    let report = action(&cfg)?;
    let dir = cfg.out_dir.join(&cfg.name);
    println!("wrote {}", dir.join("report.json").display());
    for run in &report.runs {
        let passes = run
            .total_forward_passes
            .map(|p| p.to_string())
            .unwrap_or_else(|| "-".into());
        let w1 = run
            .dist
            .as_ref()
            .and_then(|d| d.wasserstein1)
            .map(|v| format!("{v:.5}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:<24} steps={:<5} passes={passes:<9} W1={w1}",
            run.label, run.steps
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
