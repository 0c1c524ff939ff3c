//! Command-line front end: `verify`, `run`, `sweep` and `plan`.
//!
//! Exit codes: 0 success, 1 a checked invariant failed, 2 bad usage,
//! config or infeasible parallel setup.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use commands::{build_parallel, cmd_plan, cmd_run, cmd_sweep, cmd_verify, ReportRow};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::simnet::Topology;
use crate::strategies::Strategy;

#[derive(Debug, Parser)]
#[command(name = "ditsim", version, about = "Parallel DiT inference simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every oracle suite; exit 1 if any fails.
    Verify(VerifyArgs),
    /// Simulate one configuration and write its reports.
    Run(RunArgs),
    /// Simulate a grid of strategies, degrees, patch counts and sequence lengths.
    Sweep(SweepArgs),
    /// Rank every hybrid configuration for a device count with the cost model.
    Plan(PlanArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Topology file; overrides the config's.
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Degree flags; unset flags fall back to `--degree` or 1.
#[derive(Debug, Clone, Default, Args)]
pub struct ParallelFlags {
    #[arg(long)]
    pub cfg: Option<usize>,
    #[arg(long)]
    pub pipefusion: Option<usize>,
    #[arg(long)]
    pub ulysses: Option<usize>,
    #[arg(long)]
    pub ring: Option<usize>,
    #[arg(long)]
    pub patches: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Ablation: shard-only K/V buffers in pipelined hybrids.
    #[arg(long)]
    pub naive_sp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// Total degree for single-axis strategies.
    #[arg(long)]
    pub degree: Option<usize>,
    #[command(flatten)]
    pub parallel: ParallelFlags,
    /// Image tokens; overrides the config's model.
    #[arg(long)]
    pub tokens: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "sp_ulysses")]
    pub strategy: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub degree: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    pub patches: Vec<usize>,
    /// Image token counts; defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Vec<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Device count (default: all devices of the topology).
    #[arg(long)]
    pub devices: Option<usize>,
    /// Image tokens, or a preset name such as `flux-1024-64k`.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Bytes per element for traffic and memory.
    #[arg(long, default_value_t = 2)]
    pub element_size: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Score every axis order, not only the default.
    #[arg(long)]
    pub exhaustive: bool,
}

/// Whether a failure is the caller's (2) or the simulator's (1).
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Infeasible(_)
        | Error::InvalidSpec(_)
        | Error::ConditioningMismatch { .. }
        | Error::NoFeasiblePlan(_)
        | Error::Format(_)
        | Error::Json(_)
        | Error::Io(_) => 2,
        _ => 1,
    }
}

pub(crate) struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    topology_override: Option<Topology>,
}

impl Context {
    pub fn load(common: &CommonArgs, default_out: &str) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let topology_override = match &common.topology {
            Some(p) => Some(load_topology(p)?),
            None => None,
        };
        let out = common
            .out
            .clone()
            .or_else(|| config.out.clone())
            .unwrap_or_else(|| PathBuf::from(default_out));
        Ok(Self {
            config,
            out,
            topology_override,
        })
    }

    pub fn topology(&self, devices: usize) -> Result<Topology> {
        match &self.topology_override {
            Some(t) => Ok(t.clone()),
            None => self.config.resolve_topology(devices),
        }
    }
}

fn load_topology(path: &Path) -> Result<Topology> {
    if !path.exists() {
        return Err(Error::Config(format!("topology file {} does not exist", path.display())));
    }
    Topology::load(path)
}

/// Parses `args` and runs the chosen subcommand.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Verify(a) => cmd_verify(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Plan(a) => cmd_plan(&a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
