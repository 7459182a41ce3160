use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use spdagg_cli::commands::{CertifyArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs};
use spdagg_cli::{cmd_certify, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, CliError};

#[derive(Debug, Parser)]
#[command(name = "spd-agg", version, about = "Kernel-aggregated SPD pooling: train, evaluate, check gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a pipeline and write metrics (JSON lines) and a checkpoint.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Report minimum eigenvalues of aggregated and transformed matrices.
    Certify(CertifyArgs),
    /// Write a synthetic second-order-statistics dataset.
    Synth(SynthArgs),
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => print_json(&cmd_train(&args)?),
        Command::Eval(args) => print_json(&cmd_eval(&args)?),
        Command::Certify(args) => print_json(&cmd_certify(&args)?),
        Command::Synth(args) => print_json(&cmd_synth(&args)?),
        Command::Gradcheck(args) => {
            let reports = cmd_gradcheck(&args)?;
            for r in &reports {
                print_json(r);
            }
            if let Some(bad) = reports.iter().find(|r| !r.pass()) {
                let blocks: Vec<&str> = bad.blocks.iter().filter(|b| !b.pass).map(|b| b.name.as_str()).collect();
                return Err(CliError::GradCheckFailed(format!(
                    "seed {}: blocks {} exceed tolerance {:e}",
                    bad.seed,
                    blocks.join(", "),
                    bad.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spd-agg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
