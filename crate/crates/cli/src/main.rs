//! `crownlab` command line: every pipeline stage plus a one-shot run.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crownlab::Error;

mod commands;
mod serve;

#[derive(Parser, Debug)]
#[command(name = "crownlab", version, about = "Tree crown pseudo-labels and crown segmentation evaluation")]
struct Cli {
    /// Worker threads for stage-internal parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Pipeline JSON whose matching section supplies defaults; flags win.
#[derive(Args, Debug, Clone)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Terrain model, height normalization and a gap-filled canopy height model.
    Chm(commands::ChmArgs),
    /// Treetops and watershed crowns from a CHM.
    Delineate(commands::DelineateArgs),
    /// Drop segments whose mean vegetation index is below a threshold.
    NdviFilter(commands::NdviArgs),
    /// Cut annotations into overlapping tiles by the centroid rule.
    Tile(commands::TileArgs),
    /// Refine coarse masks with a box-prompted segmenter.
    Enhance(commands::EnhanceArgs),
    /// Score gate, NMS and containment filter for predictions.
    Postfilter(commands::PostfilterArgs),
    /// Match predictions to ground truth and report metrics.
    Eval(commands::EvalArgs),
    /// Run every stage from a pipeline config.
    RunAll(commands::RunAllArgs),
    /// Write a seeded synthetic scene.
    #[command(hide = true)]
    Synth(commands::SynthArgs),
    /// Serve the flood-fill mock segmenter over HTTP.
    #[command(hide = true)]
    ServeMock(serve::ServeArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) | Error::Invalid(_) => 2,
        Error::Segmenter(_) => 3,
        Error::Invariant(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(4);
        }
    }

    let result = match cli.command {
        Command::Chm(a) => commands::chm(a),
        Command::Delineate(a) => commands::delineate(a),
        Command::NdviFilter(a) => commands::ndvi_filter(a),
        Command::Tile(a) => commands::tile(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Postfilter(a) => commands::postfilter(a),
        Command::Eval(a) => commands::eval(a),
        Command::RunAll(a) => commands::run_all(a),
        Command::Synth(a) => commands::synth(a),
        Command::ServeMock(a) => serve::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
