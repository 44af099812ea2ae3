//! `geoscope`: spectral, activation-space and pathwise diagnostics for
//! finetuned checkpoints and adapters.
//!
//! Reports go to files or, with `--out -`, to standard output. Progress text
//! goes to standard error. Exit codes: 0 success, 2 invalid input, 3
//! numerical failure, 4 I/O error.

mod commands;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    ActGeomArgs, CorrelateArgs, CsdArgs, FixtureArgs, InterpolateArgs, ProfileArgs, RewindArgs,
};
use geoscope_core::GeoError;
use output::Progress;

#[derive(Debug, Parser)]
#[command(name = "geoscope", version, about = "Geometry diagnostics for finetuning updates")]
struct Cli {
    /// Worker threads for per-module work [env: GEOSCOPE_THREADS] [default: 1]
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    /// Suppress progress messages on standard error.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Retention and adaptation profiles in the pretrained singular basis.
    Profile(ProfileArgs),
    /// Procrustes residual, Gram distortion and CKA between activation dumps.
    Actgeom(ActGeomArgs),
    /// Capability-conditioned spectral drift on general and target inputs.
    Csd(CsdArgs),
    /// Write merged checkpoints along an interpolation path.
    Interpolate(InterpolateArgs),
    /// Rescale adapter layers toward a reference strength.
    Rewind(RewindArgs),
    /// Pearson and Spearman correlations between two keyed CSV tables.
    Correlate(CorrelateArgs),
    /// Write the seeded toy fixture.
    Fixture(FixtureArgs),
}

fn run(command: &Command, progress: Progress) -> geoscope_core::Result<()> {
    match command {
        Command::Profile(a) => commands::profile(a, progress),
        Command::Actgeom(a) => commands::actgeom(a, progress),
        Command::Csd(a) => commands::csd(a, progress),
        Command::Interpolate(a) => commands::interpolate(a, progress),
        Command::Rewind(a) => commands::rewind(a, progress),
        Command::Correlate(a) => commands::correlate(a, progress),
        Command::Fixture(a) => commands::fixture(a, progress),
    }
}

/// `--threads`, else `GEOSCOPE_THREADS`, else 1.
fn thread_count(flag: Option<u16>) -> geoscope_core::Result<usize> {
    if let Some(n) = flag {
        return Ok(n as usize);
    }
    match std::env::var("GEOSCOPE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(GeoError::InvalidConfig(format!(
                "GEOSCOPE_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let progress = Progress { quiet: cli.quiet };
    let result = thread_count(cli.threads)
        .and_then(|n| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| GeoError::InvalidConfig(format!("thread pool: {e}")))
        })
        .and_then(|pool| pool.install(|| run(&cli.command, progress)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("geoscope: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
