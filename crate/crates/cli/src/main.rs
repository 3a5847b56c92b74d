//! `hoif` — estimate, simulate, report, basis-inspect.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 the Gram
//! matrix failed the invertibility check and the zero convention was applied
//! (the estimate is still written), 4 internal or numerical failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Completion;
use crate::config::RunConfig;

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_ZERO_CONVENTION: u8 = 3;
pub const EXIT_INTERNAL: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<hoif::error::Error> for Failure {
    fn from(e: hoif::error::Error) -> Self {
        use hoif::error::Error::*;
        match e {
            Numerical(_) | NonFinite(_) => Self::internal(e.to_string()),
            _ => Self::validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::validation(format!("i/o: {e}"))
    }
}

#[derive(Parser, Debug)]
#[command(name = "hoif", version, about = "Higher-order influence function estimators and simulation studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// key = value config file
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. --set basis.k=16 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (overrides the file and HOIF_SEED)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Worker threads (default: all available cores)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate a functional from a CSV of (A, Y, X1..Xd)
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Input CSV
        #[arg(long, short)]
        input: Option<PathBuf>,
    },
    /// Run a Monte Carlo study on a built-in scenario
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scenario id (S1..S5, ecc-correlated, ate-d1)
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Merge aggregate CSVs into a comparison table with slope fits
    Report {
        #[command(flatten)]
        common: Common,
        /// Aggregate CSVs written by `simulate`
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Describe a basis and optionally evaluate it at a point
    BasisInspect {
        #[command(flatten)]
        common: Common,
        /// Preset such as haar:d=1,L=3 or bspline:d=2,s=2,q=6
        #[arg(long)]
        basis: Option<String>,
        /// Comma-separated point in [0,1]^d
        #[arg(long)]
        at: Option<String>,
    },
}

fn resolve(common: &Common, extra: &[(&str, Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::defaults();
    if let Some(path) = &common.config {
        cfg.load_file(path)?;
    }
    if let Ok(seed) = std::env::var("HOIF_SEED") {
        seed.trim()
            .parse::<u64>()
            .map_err(|_| Failure::validation(format!("HOIF_SEED = '{seed}' is not an unsigned integer")))?;
        cfg.set("seed", &seed)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    for pair in &common.set {
        cfg.apply_pair(pair)?;
    }
    if let Some(out) = &common.out {
        cfg.set("output.dir", &out.display().to_string())?;
    }
    for (key, value) in extra {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn init_threads(common: &Common) -> Result<(), Failure> {
    let n = common
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Failure::validation("--threads must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::internal(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<Completion, Failure> {
    match cli.command {
        Command::Estimate { common, input } => {
            init_threads(&common)?;
            let cfg = resolve(&common, &[("input", input.map(|p| p.display().to_string()))])?;
            commands::cmd_estimate(&cfg)
        }
        Command::Simulate {
            common,
            scenario,
            reps,
            n,
        } => {
            init_threads(&common)?;
            let cfg = resolve(
                &common,
                &[
                    ("sim.scenario", scenario),
                    ("sim.reps", reps.map(|r| r.to_string())),
                    ("sim.n", n.map(|n| n.to_string())),
                ],
            )?;
            commands::cmd_simulate(&cfg)
        }
        Command::Report { common, inputs } => {
            init_threads(&common)?;
            commands::cmd_report(&resolve(&common, &[])?, &inputs)
        }
        Command::BasisInspect { common, basis, at } => {
            init_threads(&common)?;
            commands::cmd_basis_inspect(&resolve(&common, &[])?, basis.as_deref(), at.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Completion::Ok) => ExitCode::SUCCESS,
        Ok(Completion::ZeroConvention) => {
            eprintln!("warning: Gram matrix failed the invertibility check; psi_hat set to 0");
            ExitCode::from(EXIT_ZERO_CONVENTION)
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
