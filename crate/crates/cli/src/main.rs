//! `xsep`: parameter counts, equivalence and gradient checks, training,
//! evaluation and kernel timing.
//!
//! Exit status: 0 success, 1 a check failed, 2 usage or configuration error.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "xsep",
    version,
    about = "Depthwise separable convolution toolkit"
)]
struct Cli {
    /// Worker threads for the kernels; results are identical for any count
    #[arg(long, global = true, env = "XSEP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print parameter, MAC and activation counts of an architecture
    Params(commands::ParamsArgs),
    /// Check a numerical equivalence on randomized instances
    Equiv(commands::EquivArgs),
    /// Compare analytic gradients with central finite differences
    Gradcheck(commands::GradcheckArgs),
    /// Train from a TOML config
    Train(commands::TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(commands::EvalArgs),
    /// Time one convolution forward and forward+backward
    Bench(commands::BenchArgs),
    /// Write a synthetic grating dataset
    Synth(commands::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = xsep_core::runtime::set_threads(n) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Params(a) => commands::params(&a),
        Command::Equiv(a) => commands::equiv(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(commands::Status::Pass) => ExitCode::SUCCESS,
        Ok(commands::Status::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                xsep_core::Error::NonFiniteLoss { .. } => 1,
                _ => 2,
            })
        }
    }
}
