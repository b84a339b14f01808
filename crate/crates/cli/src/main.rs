//! Batch entry point: parse a scenario config, dispatch to the analyzers
//! and solvers, emit machine-readable reports.
//!
//! Usage: `parreg <command> --config <path> [--out <dir>] [--seed <n>]`
//!
//! The config is the single source of truth; its "command" field must match
//! the subcommand. Exit codes: 0 success, 2 validation error (nothing is
//! written), 3 solver failure (a diagnostic JSON is still written).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "parreg", version, about = "Parabolic-system analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Parser)]
struct RunArgs {
    /// Scenario config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed recorded in reports and used by sampled diagnostics; overrides
    /// the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pointwise ellipticity constants of a coefficient tensor.
    AnalyzeTensor(RunArgs),
    /// Invertibility-window arithmetic (and optional interval estimate).
    Sneiberg(RunArgs),
    /// Solution-bound constant check for a nonautonomous family.
    Lions(RunArgs),
    /// Linear nonautonomous solve with maximal-regularity diagnostics.
    SolveParabolic(RunArgs),
    /// Quasilinear fixed-point / continuation solve.
    SolveQuasilinear(RunArgs),
    /// Two-species chemotaxis run (full or reduced path).
    Chemotaxis(RunArgs),
    /// Mesh construction and boundary-measure diagnostics.
    GeometryCheck(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::AnalyzeTensor(_) => "analyze-tensor",
            Command::Sneiberg(_) => "sneiberg",
            Command::Lions(_) => "lions",
            Command::SolveParabolic(_) => "solve-parabolic",
            Command::SolveQuasilinear(_) => "solve-quasilinear",
            Command::Chemotaxis(_) => "chemotaxis",
            Command::GeometryCheck(_) => "geometry-check",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::AnalyzeTensor(a)
            | Command::Sneiberg(a)
            | Command::Lions(a)
            | Command::SolveParabolic(a)
            | Command::SolveQuasilinear(a)
            | Command::Chemotaxis(a)
            | Command::GeometryCheck(a) => a,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let args = cli.command.args().clone();
    match commands::run(name, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::RunError::Validation(msg)) => {
            eprintln!("validation error: {msg}");
            ExitCode::from(2)
        }
        Err(commands::RunError::Solver { out_dir, reason }) => {
            eprintln!("solver failure: {reason}");
            let diagnostic = serde_json::json!({
                "error": true,
                "reason": reason,
            });
            if let Some(dir) = out_dir {
                let _ = std::fs::create_dir_all(&dir);
                let _ = std::fs::write(
                    dir.join("error.json"),
                    serde_json::to_string_pretty(&diagnostic).unwrap_or_default(),
                );
            }
            ExitCode::from(3)
        }
    }
}
