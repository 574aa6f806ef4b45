//! `volstream` command line.

mod config;
mod generate;
mod report;
mod stream;
mod trace_check;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use config::{Failure, Outcome};

#[derive(Debug, Parser)]
#[command(name = "volstream", version, about = "Live volumetric video streaming pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a scene script into per-camera PLY sequences and a manifest.
    Generate(generate::GenerateArgs),
    /// Run capture through transport end to end and log the session.
    Stream(stream::StreamArgs),
    /// Aggregate session logs into bandwidth and latency tables.
    Report(report::ReportArgs),
    /// Validate bandwidth or viewport trace files.
    TraceCheck(trace_check::TraceCheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Stream(a) => stream::run(a),
        Command::Report(a) => report::run(a),
        Command::TraceCheck(a) => trace_check::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
