//! Command-line interface for deterministic and variational graph
//! convolutional networks: dataset generation, training, Monte Carlo
//! evaluation, attention export, and FMCI conversion.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 model
//! compatibility error, 5 unsupported capability.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vgcn::error::Error;

/// Which file or phase an error came from; the same library error maps to
/// different exit codes depending on whether it concerns configuration or
/// data inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ConfigFile,
    DataFile,
    CheckpointFile,
    Run,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new(2, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        CliError::new(1, message)
    }

    /// Map a library error to an exit code given the phase it occurred in.
    pub fn stage(stage: Stage, e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Index(_) => 2,
            Error::UnsupportedModel(_) => 5,
            Error::Incompatible(_) | Error::Version { .. } | Error::State(_) => 4,
            Error::Data(_) => 3,
            Error::Malformed(_) | Error::Schema { .. } | Error::GraphValidation(_) | Error::Io(_) => {
                if stage == Stage::ConfigFile {
                    2
                } else {
                    3
                }
            }
            Error::Shape(_) | Error::Contract(_) => 1,
        };
        CliError::new(code, e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "vgcn",
    version,
    about = "Deterministic and variational graph convolutional networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(commands::GenerateArgs),
    /// Train a model described by a JSON experiment config.
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint with Monte Carlo integration.
    Eval(commands::EvalArgs),
    /// Export per-layer attention means and variances.
    Attention(commands::AttentionArgs),
    /// Convert a VGAT checkpoint into a UA-FMCI checkpoint.
    ConvertFmci(commands::ConvertArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::run_train(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Attention(args) => commands::run_attention(args),
        Command::ConvertFmci(args) => commands::run_convert(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
