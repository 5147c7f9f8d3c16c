//! Command-line front end for the delta-compression toolkit.
//!
//! Workflow: `gen-suite` makes a synthetic task suite, `compress` builds the
//! shared base vector plus one compressed artifact per task, `train` tunes
//! each artifact's two scalar modulators, `reconstruct` rebuilds task
//! weights, and `sweep`/`ablate`/`report` produce analysis CSVs.
//!
//! Contract: stdout carries only data lines and file paths; on failure,
//! stderr carries exactly one `ERROR code=<n> msg=...` line and the process
//! exits with that code (2 validation, 3 I/O, 4 numerical). Given identical
//! flags and inputs, every subcommand writes byte-identical outputs.

mod commands;
mod error;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "deltashift",
    version,
    about = "Delta compression with a dynamically shifted base model",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic suite: pretrained weights, per-task finetuned
    /// weights, input pools, and held-out evaluation data.
    GenSuite(commands::gen_suite::GenSuiteArgs),
    /// Build the base vector and one compressed artifact per task with
    /// closed-form modulator initialization.
    Compress(commands::compress::CompressArgs),
    /// Optimize each artifact's modulators on its task's input pool.
    Train(commands::train::TrainArgs),
    /// Rebuild a task's weights from pretrained + base + artifact.
    Reconstruct(commands::reconstruct::ReconstructArgs),
    /// Evaluate a metric over a modulator grid for one task.
    Sweep(commands::sweep::SweepArgs),
    /// Compare two modulator initialization strategies across tasks.
    Ablate(commands::ablate::AblateArgs),
    /// Storage accounting over an artifact directory.
    Report(commands::report::ReportArgs),
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            // First line only: clap appends usage hints across several lines.
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            return fail(&CliError::Validation(first.to_owned()));
        }
    };
    if let Err(e) = init_threads() {
        return fail(&e);
    }
    let result = match &cli.command {
        Command::GenSuite(args) => args.run(),
        Command::Compress(args) => args.run(),
        Command::Train(args) => args.run(),
        Command::Reconstruct(args) => args.run(),
        Command::Sweep(args) => args.run(),
        Command::Ablate(args) => args.run(),
        Command::Report(args) => args.run(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

/// Print the single machine-readable failure line and return the exit code.
/// Delivery is best-effort: a closed stderr must not mask the exit code.
fn fail(e: &CliError) -> i32 {
    use std::io::Write;
    let _ = writeln!(
        std::io::stderr(),
        "ERROR code={} msg={}",
        e.code(),
        single_line(e.message())
    );
    e.code()
}

/// Collapse any whitespace (including newlines) to single spaces so the
/// stderr protocol stays one line no matter what an error prints.
fn single_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `DELTASHIFT_THREADS` caps the global worker pool used for per-task and
/// per-grid-cell parallelism. Unset means one worker per core.
fn init_threads() -> Result<(), CliError> {
    let value = match std::env::var("DELTASHIFT_THREADS") {
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(CliError::Validation(format!("DELTASHIFT_THREADS: {e}"))),
        Ok(v) => v,
    };
    let threads: usize = value.trim().parse().map_err(|_| {
        CliError::Validation(format!(
            "DELTASHIFT_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    if threads == 0 {
        return Err(CliError::Validation(
            "DELTASHIFT_THREADS must be a positive integer, got \"0\"".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Validation(format!("DELTASHIFT_THREADS: {e}")))
}
