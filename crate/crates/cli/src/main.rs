//! `symctl`: synthesize, verify and simulate compositional safety
//! controllers, and run the thermal building benchmarks.

mod commands;
mod config;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use symctl::simulation::Policy;
use symctl::synthesis::{CountError, CountStrategy};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("counting failed: {0}")]
    Counting(#[from] CountError),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Counting(_) => 3,
            CliError::MissingArtifact(_) => 4,
            CliError::Verification(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "symctl", version, about = "Compositional symbolic safety-controller synthesis")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured counting strategy.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<CountStrategy>,
    /// Load abstractions saved by an earlier run with the same configuration,
    /// and save newly built ones.
    #[arg(long)]
    pub reuse: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build abstractions, synthesize, count the composed domain and save controllers.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Also write every controller as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the property checks on the configured instance.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the closed loop with saved controllers.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Initial state, comma separated (default: centre of a domain cell).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        horizon: usize,
        #[arg(long, default_value = "lex-min", value_parser = parse_policy)]
        policy: Policy,
    },
    /// Reproduce the building experiments.
    Bench {
        /// Experiment: 1 (four rooms, six resolutions) or 2 (twenty rooms).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        case: u8,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Skip configurations estimated to overrun this many seconds in total.
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<CountStrategy>,
    },
}

fn parse_strategy(s: &str) -> Result<CountStrategy, String> {
    s.parse()
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: symctl::simulation::SimulationError| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Synthesize { common, json } => commands::synthesize(&common, json),
        Command::Verify { common } => verify::run(&common),
        Command::Simulate {
            common,
            x0,
            horizon,
            policy,
        } => commands::simulate(&common, x0, horizon, policy),
        Command::Bench {
            case,
            out,
            time_budget,
            strategy,
        } => commands::bench(case, &out, time_budget, strategy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
