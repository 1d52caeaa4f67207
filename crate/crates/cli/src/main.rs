use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lownoise::pipeline::{self, Command};
use lownoise::{parse_config, ExperimentConfig, StageError};

#[derive(Parser)]
#[command(
    name = "lownoise",
    version,
    about = "Low-noise diffusion diagnostics on Gaussian mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate the mixture, training subsets and test sets.
    GenData(Common),
    /// Train (or reuse) the checkpoints the probes need.
    Train(Common),
    /// Run the configured probes on the checkpoints.
    Probe(Common),
    /// Build curves, histograms and aggregate tables from probe outputs.
    Report(Common),
    /// Render SVG plots from the report tables.
    Plot(Common),
    /// Check manifest hashes and recompute probe aggregates.
    Verify(Common),
    /// All stages in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

fn load(c: &Common) -> Result<ExperimentConfig, StageError> {
    let mut cfg = parse_config(&c.config)?;
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, command) = match &cli.command {
        Sub::GenData(c) => (c, Some(Command::GenData)),
        Sub::Train(c) => (c, Some(Command::Train)),
        Sub::Probe(c) => (c, Some(Command::Probe)),
        Sub::Report(c) => (c, Some(Command::Report)),
        Sub::Plot(c) => (c, Some(Command::Plot)),
        Sub::Run(c) => (c, Some(Command::Run)),
        Sub::Verify(c) => (c, None),
    };
    let cfg = match load(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let root = cfg.out_dir.clone();
    match command {
        Some(cmd) => match pipeline::execute(cmd, &cfg, &root) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        None => match pipeline::verify(&cfg, &root) {
            Ok(problems) if problems.is_empty() => {
                println!("ok: {}", root.display());
                ExitCode::SUCCESS
            }
            Ok(problems) => {
                for p in problems {
                    eprintln!("{p}");
                }
                ExitCode::FAILURE
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
