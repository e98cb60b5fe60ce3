//! Binary entry point: parse a config file, validate it, and either echo
//! the canonical form (`--check`) or run the requested computation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use qbeats::cli::{echo_config, init_parallelism, parse_config, run};

/// Simulate conditioned photon correlations of a driven two-mode cavity
/// holding one multilevel atom.
#[derive(Parser)]
#[command(name = "qbeats", version)]
struct Args {
    /// Run configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, overriding the config's `out` key.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Ensemble seed, overriding the config's `seed` key.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Validate the config and print its canonical form without computing.
    #[arg(long)]
    check: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Err(e) = init_parallelism() {
        eprintln!("qbeats: {e}");
        return ExitCode::from(2);
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => {
            eprintln!("qbeats: {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut cfg = match parse_config(&text) {
        Ok(cfg) => cfg,
        Err(errors) => {
            for err in &errors {
                eprintln!("{}: {err}", args.config.display());
            }
            eprintln!("qbeats: {} config error(s)", errors.len());
            return ExitCode::from(2);
        }
    };
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.check {
        print!("{}", echo_config(&cfg));
        return ExitCode::SUCCESS;
    }
    match run(&cfg) {
        Ok(summary) => {
            for file in &summary.files {
                eprintln!("wrote {}", file.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qbeats: {e}");
            ExitCode::from(1)
        }
    }
}
