//! `dfkc`: run corrected samplers, master-equation oracles and the Ising
//! annealing experiment from a JSON configuration.

mod commands;
mod config;
mod output;
mod selfcheck;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Task};

const AFTER_HELP: &str = "\
Exit codes: 0 success, 1 check failure or runtime error, 2 usage or configuration error.

Artifacts (written atomically to --out):
  sample    samples.csv  particle,x0,...,x{d-1},log_weight (tokens are 0..V-1)
            trace.csv    step,tau,ess,mean_g,resampled
            summary.json schema_version, SNIS marginals and mean tokens, terminal ESS,
                         resample count, exact comparison for small spaces, wall time
  oracle    oracle_report.json  master-equation report; exit 0 iff the run is stable
                                and max TV <= tolerance
  ising     samples.csv  config_index,energy,magnetization,log_weight
            metrics.json W2 energy, W2 |m|, correlation MSE, single-run energy check";

#[derive(Debug, Parser)]
#[command(name = "dfkc", version, about = "Feynman-Kac corrected sampling for masked discrete diffusion", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Weighted SMC from the corrected target.
    Sample(RunArgs),
    /// Integrate the weighted master equation and compare to the exact target.
    Oracle(RunArgs),
    /// Anneal an exactly enumerated Ising model and score the result.
    Ising(RunArgs),
    /// Run the built-in identity and oracle checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the configured one; default "dfkc-out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Oracle pass threshold on max TV (default 1e-3).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Oracle only: drop the weight term (negative control).
    #[arg(long)]
    no_weights: bool,
}

#[derive(Debug, Args)]
struct SelfcheckArgs {
    #[arg(long)]
    threads: Option<usize>,
    /// Negate the weight term in the oracle runs; the check must then fail.
    #[arg(long, hide = true)]
    inject_g_sign_flip: bool,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad usage or configuration; nothing was computed or written.
    Config(String),
    /// A check ran and did not pass.
    Check(String),
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: dfkc::Error) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn io(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Check(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl From<dfkc::Error> for CliError {
    fn from(e: dfkc::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Check(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

pub struct Overrides {
    pub tolerance: Option<f64>,
    pub no_weights: bool,
}

fn install_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn run_task(task: Task, args: &RunArgs) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    config.check_task(task)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.no_weights && task != Task::Oracle {
        return Err(CliError::Config(
            "--no-weights only applies to the oracle command".into(),
        ));
    }
    install_threads(args.threads)?;
    let base_dir = args.config.parent().unwrap_or(Path::new("."));
    let out = args
        .out
        .clone()
        .or_else(|| config.out.as_ref().map(|o| base_dir.join(o)))
        .unwrap_or_else(|| PathBuf::from("dfkc-out"));
    let overrides = Overrides {
        tolerance: args.tolerance,
        no_weights: args.no_weights,
    };
    match task {
        Task::Sample => commands::cmd_sample(&config, base_dir, &out),
        Task::Oracle => commands::cmd_oracle(&config, base_dir, &out, &overrides),
        Task::Ising => commands::cmd_ising(&config, &out),
        Task::Selfcheck => unreachable!("selfcheck takes no configuration"),
    }
}

fn run_selfcheck(args: &SelfcheckArgs) -> Result<(), CliError> {
    install_threads(args.threads)?;
    let rows = selfcheck::run(args.inject_g_sign_flip);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for row in &rows {
        println!(
            "{}  {:width$}  {}",
            if row.pass { "PASS" } else { "FAIL" },
            row.name,
            row.detail
        );
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    if failed == 0 {
        println!("all {} checks passed", rows.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("{failed} of {} checks failed", rows.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Sample(args) => run_task(Task::Sample, args),
        Command::Oracle(args) => run_task(Task::Oracle, args),
        Command::Ising(args) => run_task(Task::Ising, args),
        Command::Selfcheck(args) => run_selfcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
