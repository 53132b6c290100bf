//! Command-line entry point: `nvpf <mode> --config <path> [--seed N] [--out DIR]`.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on numeric
//! divergence (a non-finite training loss or a failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use nvpf::config::{Mode, RunConfig};
use nvpf::harness;
use nvpf::Error;

/// Grouped-feature fusion flows: train, evaluate, generate data, check
/// gradients, and inspect checkpoints.
#[derive(Parser)]
#[command(name = "nvpf", version, about)]
struct Cli {
    /// One of: train-nvpf, train-tnvpf, eval, gen-data, grad-check, inspect.
    mode: String,

    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Override the config's seed (and the generator seed in gen-data mode).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(run(cli))
}

fn run(cli: Cli) -> u8 {
    let mode: Mode = match cli.mode.parse() {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    let mut cfg = match RunConfig::parse_file(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    if cfg.mode != mode {
        eprintln!(
            "config error: {} says mode {} but the command line says {mode}",
            cli.config.display(),
            cfg.mode
        );
        return 2;
    }
    cfg.apply_overrides(cli.seed, cli.out);
    match harness::execute(&cfg) {
        Ok(()) => 0,
        Err(e @ (Error::NonFinite { .. } | Error::Divergence { .. })) => {
            eprintln!("{e}");
            3
        }
        Err(e) => {
            eprintln!("{e}");
            2
        }
    }
}
