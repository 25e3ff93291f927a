//! Experiment runner: data generation, sweeps, training, forecasting, control and reports.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Context;
use crate::config::{parse_seeds, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "esnmpc", version, about = "Surrogate-model predictive control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate training and validation data.
    GenData(Common),
    /// Grid-search hyperparameters on the validation forecast error.
    Sweep(Common),
    /// Train one model per seed.
    Train(Common),
    /// Write per-window forecast error series for trained models.
    Forecast(Common),
    /// Run closed-loop control for each seed.
    Control(Common),
    /// Aggregate control summaries.
    Report {
        /// Glob of summary files or run directories; may repeat.
        #[arg(long = "glob", required = true)]
        globs: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Single seed, replacing the config's seed list.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed range `N..M` (exclusive), `N..=M` or a comma list.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Output directory, replacing the config's.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Errors split by exit code: 1 for usage and configuration, 2 at run time.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn context(c: &Common) -> Result<Context, Failure> {
    let mut cfg = RunConfig::load(&c.config).map_err(Failure::Usage)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &c.seeds {
        cfg.seeds = parse_seeds(s).map_err(Failure::Usage)?;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if c.workers == 0 {
        return Err(Failure::Usage(anyhow::anyhow!("--workers must be positive")));
    }
    Context::new(cfg, c.workers).map_err(Failure::Usage)
}

fn execute(command: &Command) -> Result<(), Failure> {
    let rt = Failure::Runtime;
    match command {
        Command::GenData(c) => context(c)?.gen_data().map_err(rt),
        Command::Sweep(c) => context(c)?.sweep().map_err(rt),
        Command::Train(c) => context(c)?.train().map_err(rt),
        Command::Forecast(c) => context(c)?.forecast().map_err(rt),
        Command::Control(c) => context(c)?.control().map_err(rt),
        Command::Report { globs } => report::run(globs).map(|t| print!("{t}")).map_err(rt),
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
