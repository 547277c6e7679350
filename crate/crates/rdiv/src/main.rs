//! Experiment CLI: parse a TOML config, run the requested experiment and
//! write the result CSV plus a JSON manifest.

use clap::{Parser, Subcommand};
use rdiv::harness::{self, ExperimentConfig, ExperimentKind};
use rdiv::{Error, Result};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "rdiv", version, about = "Regularized DeepIV experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Parser)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default from config).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the config's replication count.
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Proximal benchmark: counterfactual-mean NMSE per link and alpha.
    Bench(RunArgs),
    /// Deterministic regularization-bias slopes.
    BiasStudy(RunArgs),
    /// Error-vs-n rate study on the linear-Gaussian family.
    RateStudy(RunArgs),
    /// Two-stage Best-ERM hyperparameter selection.
    Select(RunArgs),
}

impl Command {
    fn kind(&self) -> ExperimentKind {
        match self {
            Command::Bench(_) => ExperimentKind::Bench,
            Command::BiasStudy(_) => ExperimentKind::BiasStudy,
            Command::RateStudy(_) => ExperimentKind::RateStudy,
            Command::Select(_) => ExperimentKind::Select,
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Bench(a)
            | Command::BiasStudy(a)
            | Command::RateStudy(a)
            | Command::Select(a) => a,
        }
    }
}

fn load_config(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = harness::parse_config(&args.config)?;
    if cfg.experiment != kind {
        return Err(Error::Config(format!(
            "config declares experiment \"{}\" but the subcommand is \"{}\"",
            cfg.experiment.name(),
            kind.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = args.replications {
        if reps == 0 {
            return Err(Error::InvalidParameter("replications must be at least 1".into()));
        }
        cfg.replications = reps;
    }
    if let Some(out) = &args.out {
        cfg.output_path = Some(out.clone());
    }
    if let Some(threads) = args.threads {
        if threads == 0 {
            return Err(Error::InvalidParameter("threads must be at least 1".into()));
        }
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let kind = cli.command.kind();
    let cfg = load_config(kind, cli.command.args())?;
    let csv_path = cfg
        .output_path
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", kind.name())));
    let start = Instant::now();
    let rows = harness::run(&cfg, cfg.threads)?;
    harness::write_outputs(&cfg, &rows, &csv_path, start.elapsed().as_millis() as u64)?;
    println!("{}: {} rows -> {}", kind.name(), rows.len(), csv_path.display());
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error[{}]: {e}", e.category());
        std::process::exit(1);
    }
}
