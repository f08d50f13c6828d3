//! Experiment harness for the cycle-association engine.
//!
//! Subcommands: `gradcheck` verifies every analytic gradient against central
//! differences, `train` runs the two-stage schedule on a synthetic identity
//! world, `sweep` maps retrieval quality across pair-symmetry levels, and
//! `eval` re-scores a checkpoint (or a diagnostic fixture).
//!
//! Exit codes: 0 success; 1 gradient verification failure; 2 invalid config
//! or input (including unreadable or incompatible checkpoints); 3 training
//! aborted on a non-finite loss.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cyclematch", version, about = "Cycle-association experiments on synthetic identity worlds")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check every hand-derived gradient against central differences.
    Gradcheck(commands::GradcheckArgs),
    /// Train an embedder; writes config, log, checkpoint, and metrics.
    Train(commands::TrainArgs),
    /// Train across a grid of symmetry means and summarize rank-1 per point.
    Sweep(commands::SweepArgs),
    /// Evaluate a checkpoint or diagnostic fixture on the configured world.
    Eval(commands::EvalArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gradcheck(args) => commands::gradcheck(args),
        Cmd::Train(args) => commands::train(args),
        Cmd::Sweep(args) => commands::sweep(args),
        Cmd::Eval(args) => commands::eval(args),
    };
    let code = match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code_for(&err)
        }
    };
    std::process::exit(code);
}

/// Numerical aborts exit 3; everything else that errors is an input or
/// configuration problem and exits 2.
fn exit_code_for(err: &anyhow::Error) -> i32 {
    use cyclematch::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. })
        | Some(Error::NonFinite(_))
        | Some(Error::DegenerateColumn { .. }) => 3,
        _ => 2,
    }
}
