mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Overrides;

/// Level lines of the Gaussian free field with a free boundary arc:
/// closed-form probabilities, Monte Carlo simulation and numerical checks.
#[derive(Debug, Parser)]
#[command(name = "levelline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON configuration file; without it the built-in demo configuration is used.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed base for trajectories and samples.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Number of trajectories.
    #[arg(long = "n-traj", global = true, value_name = "N")]
    n_traj: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    /// Directory for JSON and CSV outputs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the free-arc probability and its factors.
    Prob {
        /// Also print the limit as the free arc recedes to -infinity.
        #[arg(long = "dirichlet-limit")]
        dirichlet_limit: bool,
    },
    /// Estimate the free-arc probability by simulating the driving process.
    Simulate,
    /// Run the martingale, reweighting, Green function and Loewner checks.
    Verify {
        /// martingale, girsanov, quadratic_variation, green, loewner or all.
        #[arg(long, value_name = "NAME", default_value = "all")]
        check: String,
    },
    /// Simulate one driving path and trace the corresponding curve.
    Trace {
        /// Trace this driving path (CSV with columns t,w) instead of simulating one.
        #[arg(long, value_name = "PATH")]
        driving: Option<PathBuf>,
    },
    /// Lattice covariance check and level-line frequency study.
    Dgff,
}

const EXIT_PASS: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_FAILED: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::from(EXIT_PASS),
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let overrides = Overrides { seed: cli.seed, n_traj: cli.n_traj, workers: cli.workers, out: cli.out.clone() };
    let cfg = config::load(cli.config.as_deref())?.resolve(&overrides)?;
    let report = match &cli.command {
        Command::Prob { dirichlet_limit } => {
            let (text, report) = commands::prob(&cfg, *dirichlet_limit)?;
            print!("{text}");
            return Ok(report.passed);
        }
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Verify { check } => commands::verify(&cfg, check)?,
        Command::Trace { driving } => commands::trace(&cfg, driving.as_ref())?,
        Command::Dgff => commands::dgff(&cfg)?,
    };
    println!("{}", serde_json::to_string_pretty(&report.payload)?);
    Ok(report.passed)
}
