use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod ingest;
mod output;
mod run;
mod simulate;

/// Input problems exit with 2, runtime and sampler failures with 3.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub fn core_error(e: concordance::Error) -> CliError {
    match e {
        concordance::Error::Sampler(_) | concordance::Error::DegenerateConditional { .. } => {
            CliError::Runtime(e.to_string())
        }
        _ => CliError::Input(e.to_string()),
    }
}

#[derive(Parser)]
#[command(name = "concordance", version, about = "Cross-calibration of instrument effective areas and source fluxes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit or sample the model described by a run config.
    Run {
        /// key = value run configuration; relative paths in it resolve against its directory.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's `output`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every post-warmup draw to draws.csv.
        #[arg(long)]
        draws: bool,
        /// Write per-parameter posterior histogram CSVs under plots/.
        #[arg(long)]
        emit_plot_data: bool,
    },
    /// Generate observations from a truth-spec config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Prior spread written to calibration.csv for every instrument.
        #[arg(long, default_value_t = 0.1)]
        calibration_tau: f64,
    },
}

fn read_config(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            draws,
            emit_plot_data,
        } => {
            let text = read_config(&config)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let cfg = run::RunConfig::parse(&text, base, out.as_deref())?;
            let flags = run::RunFlags {
                draws,
                plot_data: emit_plot_data,
            };
            let status = run::execute(&config, &text, &cfg, &flags)?;
            println!("{status}: wrote {}", cfg.output.display());
        }
        Command::Simulate {
            config,
            seed,
            out,
            calibration_tau,
        } => {
            let text = read_config(&config)?;
            for w in simulate::execute(&text, seed, calibration_tau, &out)? {
                eprintln!("WARN: {w}");
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
