//! `rhl` — recurrent-event hazards by level.
//!
//! Subcommands drive the pipeline: simulate clustered event data, fit the
//! proportional-intensity model and reconstruct compensators, decompose them
//! across hierarchy levels, and fit the student-level logistic predictor.
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure. Set `RHL_LOG` for log verbosity.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::StageError;
use config::{load_config, RunConfig};
use rhl_core::ErrorCategory;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rhl", version, about = "Multilevel recurrent-event hazard pipeline")]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (stages are deterministic; 1 keeps runs bit-stable).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate clustered event data and the simulation study report.
    Simulate,
    /// Fit the event model and reconstruct compensator curves.
    Fit,
    /// Decompose compensators into level-1/level-2 components.
    Decompose,
    /// Fit the student-level logistic model on covariates and scores.
    Predict,
    /// Run simulate, fit, decompose, and predict in sequence.
    Pipeline,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.io.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err("threads must be >= 1".into());
        }
        config.threads = threads;
    }
    Ok(config)
}

fn error_record(stage: &str, message: &str, exit_code: u8) -> String {
    serde_json::json!({
        "stage": stage,
        "error": message,
        "exit_code": exit_code,
    })
    .to_string()
}

fn run(cli: &Cli, config: &RunConfig) -> Result<(), StageError> {
    match cli.command {
        Command::Simulate => commands::cmd_simulate(config).map(|_| ()),
        Command::Fit => commands::cmd_fit(config).map(|_| ()),
        Command::Decompose => commands::cmd_decompose(config).map(|_| ()),
        Command::Predict => commands::cmd_predict(config),
        Command::Pipeline => commands::cmd_pipeline(config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RHL_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error display
            let message = e.to_string();
            if e.use_stderr() {
                eprintln!("{message}");
                eprintln!("{}", error_record("cli", "argument parsing failed", 1));
                return ExitCode::from(1);
            }
            println!("{message}");
            return ExitCode::SUCCESS;
        }
    };

    let config = match resolve_config(&cli) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("{}", error_record("config", &message, 1));
            return ExitCode::from(1);
        }
    };

    match run(&cli, &config) {
        Ok(()) => {
            log::info!("outputs written to {}", config.io.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(StageError { stage, error }) => {
            let exit_code = match error.category() {
                ErrorCategory::Usage => 1,
                ErrorCategory::Data => 2,
                ErrorCategory::Numerical => 3,
            };
            eprintln!("{}", error_record(stage, &error.to_string(), exit_code));
            ExitCode::from(exit_code)
        }
    }
}
