use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use pwinr_cli::{
    cmd_eval, cmd_infer, cmd_phantom, cmd_report, cmd_sweep, cmd_train, exit_code, sweep_summary_csv, EvalArgs,
    InferArgs, PhantomArgs, ReportArgs, SweepArgs, TrainArgs,
};

/// Fit, render and evaluate implicit neural representations of plane-wave
/// ultrasound stacks.
#[derive(Parser)]
#[command(name = "pwinr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic plane-wave stack.
    Phantom(PhantomArgs),
    /// Train a model on a stack.
    Train(TrainArgs),
    /// Render one view from trained weights.
    Infer(InferArgs),
    /// Evaluate trained weights against a stack.
    Eval(EvalArgs),
    /// Train and evaluate one model per training-view count.
    Sweep(SweepArgs),
    /// Compression ratio of a weight file against a stack.
    Report(ReportArgs),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(args) => {
            let stack = cmd_phantom(&args)?;
            println!(
                "wrote {} ({}x{}, {} angles)",
                args.out.display(),
                stack.height(),
                stack.width(),
                stack.angle_count()
            );
        }
        Command::Train(args) => {
            let outcome = cmd_train(&args)?;
            let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} iterations on {} views, final loss {last:.6}; wrote {}",
                outcome.manifest.iterations_completed,
                outcome.manifest.training_indices.len(),
                args.out.display()
            );
        }
        Command::Infer(args) => {
            let img = cmd_infer(&args)?;
            println!("wrote {} ({}x{})", args.out.display(), img.rows(), img.cols());
        }
        Command::Eval(args) => {
            let report = cmd_eval(&args)?;
            print!("{}", report.aggregate_json());
        }
        Command::Sweep(args) => {
            let rows = cmd_sweep(&args)?;
            print!("{}", sweep_summary_csv(&rows));
        }
        Command::Report(args) => {
            println!("{}", cmd_report(&args)?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
