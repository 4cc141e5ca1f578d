//! Thin command-line wrapper: `train`, `eval`, `fuse`, `diagnose`.
//! Results go to stdout, diagnostics to stderr; the exit code is nonzero on
//! any error (2 for usage/config problems, 1 otherwise).

use clap::{Parser, Subcommand};
use spikenet::error::Error;
use spikenet::run;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spikenet", version, about = "Train and inspect deep spiking networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file; writes per-epoch metrics and checkpoints.
    Train { config: PathBuf },
    /// Evaluate a checkpoint on a dataset (toy name or manifest path).
    Eval { checkpoint: PathBuf, dataset: String },
    /// Fold normalization into weights: spike-only inference checkpoint.
    Fuse { input: PathBuf, output: PathBuf },
    /// Run a diagnostic (gradnorm | variance | firing | opcount).
    Diagnose { kind: String, config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> spikenet::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let outcome = run::cmd_train(&config)?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "epoch {}: train_acc={:.4} eval_acc={:.4} loss={:.6}",
                    last.epoch, last.train_acc, last.eval_acc, last.train_loss
                );
            }
            println!("metrics: {}", outcome.metrics_path.display());
            println!("checkpoint: {}", outcome.final_checkpoint.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, dataset } => {
            let outcome = run::cmd_eval(&checkpoint, &dataset)?;
            println!(
                "accuracy={:.4} items={} mean_firing_rate={:.4}",
                outcome.accuracy, outcome.items, outcome.mean_firing_rate
            );
            for (name, rate) in &outcome.per_layer_rates {
                println!("layer {name}: rate={rate:.4}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fuse { input, output } => {
            run::cmd_fuse(&input, &output)?;
            println!("fused checkpoint written to {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Diagnose { kind, config } => {
            let outcome = run::cmd_diagnose(&kind, &config)?;
            println!("{}", outcome.line);
            println!("csv: {}", outcome.csv_path.display());
            Ok(if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}
