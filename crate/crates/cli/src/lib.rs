//! Command-line front end for the jano sampler: run configs, experiment
//! commands and their CSV/JSON reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::Path;

pub use commands::{resolve_workers, Context, WORKERS_ENV};
pub use config::{load_config, parse_config, RunConfig};
pub use error::{CliError, Result};
pub use output::{Manifest, ManifestEntry, OutputDir, MANIFEST_NAME};

/// The experiment commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Analyze,
    Run,
    Ablate,
    Constancy,
}

/// Loads the config, applies the seed override and runs `command`.
pub fn execute(
    command: Command,
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    workers: Option<usize>,
    run_dir: Option<&Path>,
) -> Result<Manifest> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ctx = Context::new(cfg, out, resolve_workers(workers)?)?;
    match command {
        Command::Simulate => commands::simulate::cmd_simulate(&ctx),
        Command::Analyze => commands::analyze::cmd_analyze(&ctx, run_dir),
        Command::Run => commands::run::cmd_run(&ctx),
        Command::Ablate => commands::ablate::cmd_ablate(&ctx),
        Command::Constancy => commands::constancy::cmd_constancy(&ctx),
    }
}
