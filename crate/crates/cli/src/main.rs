//! `flextsf`: synthetic data, training, pre-training, fine-tuning,
//! evaluation, forecasting and ablations from one binary.

mod commands;
mod config;
mod failure;

use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use commands::Command;
use config::{RunConfig, KEYS_HELP};
use failure::Failure;

#[derive(Parser)]
#[command(name = "flextsf", version, about = "Forecasting for regular and irregular time series", after_help = KEYS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Overrides {
    /// `--config FILE` then any `--key value` / `--key=value` overrides
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    args: Vec<String>,
}

#[derive(Subcommand)]
enum Sub {
    /// Write a synthetic corpus: data.csv and manifest.toml
    #[command(after_help = KEYS_HELP)]
    Synth(Overrides),
    /// Classic training from scratch; writes a checkpoint and a test-split report
    #[command(after_help = KEYS_HELP)]
    Train(Overrides),
    /// Self-supervised pre-training on random windows
    #[command(after_help = KEYS_HELP)]
    Pretrain(Overrides),
    /// Few-shot fine-tuning of the io layers of `checkpoint` on finetune.k samples
    #[command(after_help = KEYS_HELP)]
    Finetune(Overrides),
    /// Evaluate `checkpoint` on the test split of the data
    #[command(after_help = KEYS_HELP)]
    Eval(Overrides),
    /// Forecast forecast.horizon points past the end of every series
    #[command(after_help = KEYS_HELP)]
    Forecast(Overrides),
    /// Train the base model and each ablation variant with the same budget
    #[command(after_help = KEYS_HELP)]
    Ablate(Overrides),
}

fn run(cli: Cli) -> Result<String, Failure> {
    let (cmd, o) = match cli.command {
        Sub::Synth(o) => (Command::Synth, o),
        Sub::Train(o) => (Command::Train, o),
        Sub::Pretrain(o) => (Command::Pretrain, o),
        Sub::Finetune(o) => (Command::Finetune, o),
        Sub::Eval(o) => (Command::Eval, o),
        Sub::Forecast(o) => (Command::Forecast, o),
        Sub::Ablate(o) => (Command::Ablate, o),
    };
    let (path, pairs) = config::parse_overrides(&o.args)?;
    let cfg = RunConfig::load(path.as_deref(), &pairs)?;
    commands::run(cmd, &cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            eprintln!("done in {:.1}s", start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code() as u8)
        }
    }
}
