use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use commands::{StreamArgs, SweepArgs};
use config::{CommonFlags, RunConfig};
use error::CliError;

/// Equilibrium solver and decoding harness for the multi-principal
/// incentive game.
#[derive(Debug, Parser)]
#[command(name = "cage", version)]
struct Cli {
    /// Print the CSV column reference and exit.
    #[arg(long)]
    schema: bool,
    #[command(flatten)]
    common: CommonFlags,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve one instance from zero incentives.
    Solve {
        /// Instance JSON: {"tau", "pi0", "weights", "rewards"}.
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Decode a stream once per preference vector and score the results.
    Sweep(SweepArgs),
    /// Decode one stream under one preference vector.
    Decode {
        #[command(flatten)]
        stream: StreamArgs,
        /// Preference weights, e.g. "0.5,0.5".
        #[arg(long)]
        weights: String,
        /// Sample tokens (seeded by --seed) instead of greedy selection.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regret along the solve trace and perturbation stability probes.
    Diagnose {
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        regret_csv: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Compare the equilibrium with the potential maximizers and brute force.
    Oracle {
        instance: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        grid_step: Option<f64>,
    },
    /// Write a synthetic JSONL logit stream.
    Synth {
        #[command(flatten)]
        stream: StreamArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.schema {
        print!("{}", output::SCHEMA);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given (see --help)".into()));
    };
    let mut cfg = RunConfig::resolve(&cli.common)?;
    match command {
        Command::Solve { instance, out, trace_csv } => {
            commands::solve(&cfg, &instance, out.as_deref(), trace_csv.as_deref())
        }
        Command::Sweep(args) => commands::sweep_cmd(&cfg, &args),
        Command::Decode { stream, weights, sample, out } => {
            commands::decode_cmd(&cfg, &stream, &weights, sample, out.as_deref())
        }
        Command::Diagnose { instance, out, regret_csv, delta, probes } => {
            if let Some(d) = delta {
                cfg.diagnose.delta = d;
            }
            if let Some(p) = probes {
                cfg.diagnose.probes = p;
            }
            commands::diagnose(&cfg, &instance, out.as_deref(), regret_csv.as_deref())
        }
        Command::Oracle { instance, out, grid_step } => {
            if let Some(s) = grid_step {
                cfg.oracle.grid_step = s;
            }
            commands::oracle(&cfg, &instance, out.as_deref())
        }
        Command::Synth { stream, out } => commands::synth(&cfg, &stream, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CAGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cage: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
