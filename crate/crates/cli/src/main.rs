mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sthar::Error;

/// Train, evaluate and compare clip classifiers for human action recognition.
#[derive(Parser)]
#[command(name = "sthar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic action dataset and its manifest.
    Synth {
        /// JSON synthetic-dataset spec; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Raw)]
        format: Format,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train one model; writes checkpoint, metrics and the effective config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        context: Option<usize>,
        /// Seeds both parameter initialization and training order.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split; prints metrics JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference gradient checks in 64-bit.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradLevel::All)]
        level: GradLevel,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and test every (context, model) cell; writes CSV and JSON tables.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "12,18,24")]
        contexts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "hybrid,vit_only,cnn_baseline")]
        models: Vec<String>,
    },
}

#[derive(Args)]
struct OutArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Raw,
    Pgm,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum GradLevel {
    Ops,
    Cells,
    Models,
    All,
}

/// Command outcome other than a hard error.
pub enum Outcome {
    Ok,
    /// A check or comparison cell failed.
    Failed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, format, out } => commands::synth(spec.as_deref(), format, &out),
        Command::Train { run, model, context, seed } => commands::train(&run, model.as_deref(), context, seed),
        Command::Eval { checkpoint, data, split } => commands::eval(&checkpoint, &data, &split),
        Command::Gradcheck { level, seed } => commands::gradcheck(level, seed),
        Command::Compare { run, contexts, models } => commands::compare(&run, &contexts, &models),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
