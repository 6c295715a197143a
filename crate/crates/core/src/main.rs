use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mismatch_lasso::experiment::{self, ExperimentConfig};
use mismatch_lasso::Error;

#[derive(Parser)]
#[command(name = "mismatch-lasso", version, about = "Generalized Lasso experiments with mismatch-covariance targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and write results.csv and summary.json.
    Run { config: PathBuf },
    /// Write width.json with mean widths and sample-size estimates.
    Width { config: PathBuf },
    /// Write mismatch.json with rho_hat, rho_exact and dev_hat at the target.
    Mismatch { config: PathBuf },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Csv(_) => 3,
        Error::Infeasible { .. }
        | Error::DescentViolation { .. }
        | Error::NonFinite(_)
        | Error::InsufficientSamples { .. } => 1,
        _ => 2,
    }
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            experiment::run_to_dir(&cfg)?;
            println!("wrote results to {}", cfg.output_dir.display());
        }
        Command::Width { config } => {
            let cfg = load(&config)?;
            experiment::write_width(&cfg)?;
            println!("wrote {}", cfg.output_dir.join("width.json").display());
        }
        Command::Mismatch { config } => {
            let cfg = load(&config)?;
            let report = experiment::write_mismatch(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
