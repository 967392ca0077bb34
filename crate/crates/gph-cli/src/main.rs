use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod config;
mod error;
mod export;
mod scan;
mod setup;
mod simulate;
mod verify;

use error::CliError;

#[derive(Parser)]
#[command(
    name = "gph",
    version,
    about = "Hierarchy simulation and verification laboratory"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate a truncated hierarchy and write a run directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// also write the series in this format
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Run invariant suites and report pass/fail as JSON.
    Verify {
        /// suites to run (default: all)
        #[arg(long)]
        suite: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Parameter sweeps written as tables; an existing CSV table is resumed.
    Scan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Convert a snapshot or table to a plot-ready table.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn check_threads(t: usize) -> Result<(), CliError> {
    if t == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Simulate {
            config,
            out,
            seed,
            threads,
            format,
        } => {
            check_threads(threads)?;
            simulate::cmd_simulate(&config, &out, seed, threads, format)
        }
        Cmd::Verify {
            suite,
            out,
            threads,
        } => {
            check_threads(threads)?;
            verify::cmd_verify(&suite, out.as_deref())
        }
        Cmd::Scan {
            config,
            out,
            format,
            threads,
        } => {
            check_threads(threads)?;
            scan::cmd_scan(&config, &out, format)
        }
        Cmd::Export { input, out, format } => export::cmd_export(&input, &out, format),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gph: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
