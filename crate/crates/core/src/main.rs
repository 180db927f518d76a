use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psn_core::cli::{run, Command};
use psn_core::config::RunConfig;

/// Two-stream SAR/optical patch correspondence: synthetic data, training
/// and evaluation.
#[derive(Parser)]
#[command(name = "psn", version)]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long = "patch-size", global = true)]
    patch_size: Option<usize>,
    /// Output prefix for checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Render scenes, assemble pairs, partition and write a pool file.
    Generate,
    /// Train one network at the configured patch size.
    Train,
    /// Threshold sweep and confusion rates on the test partition.
    Eval,
    /// Key-point matching on clustered test positives.
    Match,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.patch_size {
        cfg.patch_size = p;
    }
    if let Some(o) = args.out {
        cfg.out = o;
    }
    let command = match args.command {
        Cmd::Generate => Command::Generate,
        Cmd::Train => Command::Train,
        Cmd::Eval => Command::Eval,
        Cmd::Match => Command::Match,
    };
    match run(command, &cfg, &mut std::io::stdout()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
