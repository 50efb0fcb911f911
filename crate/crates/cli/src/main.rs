//! `uwm` — batch driver for localizing, manipulating, and evaluating unsafe
//! weights in the toy dual encoder.

mod cmd;
mod io;

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

/// Command-line errors, mapped to exit codes: usage -> 1, everything
/// else -> 2. Each prints one machine-parseable `ERROR <code>:` line.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Io(_) => "io",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Io(_) => 2,
        }
    }

    pub fn from_core(e: uwm_core::Error) -> Self {
        match e {
            uwm_core::Error::Io(err) => CliError::Io(err.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "uwm",
    about = "Localize, manipulate, and evaluate unsafe weights in a toy dual encoder",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct CommonOpts {
    /// Seed; falls back to the UWM_SEED environment variable, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for scoring and metric passes. Never changes output.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world with a planted unsafe pathway.
    GenSynth(cmd::GenSynthArgs),
    /// Compute flow-based unsafe/safe score tables over a calibration set.
    Score(cmd::ScoreArgs),
    /// Select weights from a score archive and apply the alpha edit.
    Manipulate(cmd::ManipulateArgs),
    /// Gradient-magnitude pruning baselines (g-unsafe / g-safeclip).
    Baseline(cmd::BaselineArgs),
    /// Run the full metric suite and write a report.
    Evaluate(cmd::EvaluateArgs),
    /// Sweep tau or alpha and emit a CSV of key metrics.
    Sweep(cmd::SweepArgs),
    /// Compare a selection mask against a planted ground-truth mask.
    LocalizeEval(cmd::LocalizeEvalArgs),
}

fn seed_of(opts: &CommonOpts) -> u64 {
    opts.seed
        .or_else(|| std::env::var("UWM_SEED").ok().and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let kind = e.kind();
            if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("ERROR usage: {first}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenSynth(args) => cmd::gen_synth(args),
        Command::Score(args) => cmd::score(args),
        Command::Manipulate(args) => cmd::manipulate(args),
        Command::Baseline(args) => cmd::baseline(args),
        Command::Evaluate(args) => cmd::evaluate(args),
        Command::Sweep(args) => cmd::sweep(args),
        Command::LocalizeEval(args) => cmd::localize_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {}", e.code(), e);
            ExitCode::from(e.exit_code())
        }
    }
}
