use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use walkgossip::config::{ConfigError, ExperimentConfig};
use walkgossip::experiment::{self, ExperimentError, SweepAxis};

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

/// Simulator for asynchronous multi-walk and gossip SGD.
#[derive(Parser)]
#[command(name = "walkgossip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spectral gaps and return-time moments of the configured topology.
    Analyze(Common),
    /// One simulation per seed, one CSV each.
    Run(Common),
    /// Cartesian product of axis values and seeds, one aggregated CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// R, alpha, topology or V.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `run.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `run.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seeds) = &self.seeds {
            cfg.run.seeds = seeds.clone();
            cfg.validate()?;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.run.output.clone());
        Ok((cfg, out))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(c) => {
            let (cfg, out) = c.load()?;
            let (rows, path) = experiment::cmd_analyze(&cfg, &out)?;
            print!("{}", experiment::format_analysis_table(&rows));
            eprintln!("wrote {}", path.display());
        }
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let paths = experiment::cmd_run(&cfg, &out, c.jobs).context("run failed")?;
            for p in paths {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, out) = common.load()?;
            let path = experiment::cmd_sweep(&cfg, axis, &values, &out, common.jobs).context("sweep failed")?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match err.downcast_ref::<ExperimentError>() {
        Some(e) if e.is_invariant() => EXIT_INVARIANT,
        Some(ExperimentError::Io { .. } | ExperimentError::Pool(_)) => 1,
        Some(_) => EXIT_CONFIG,
        None => 1,
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
