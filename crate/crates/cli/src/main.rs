use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jano_cli::{execute, Command};

#[derive(Parser)]
#[command(name = "jano", version, about = "Convergence-aware token freezing for flow-matching samplers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render scenes and write their denoising trajectories.
    Simulate(Common),
    /// Score block complexity and correlate it with both ground truths.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Read trajectories from a previous `simulate` output.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run the three-phase pipeline and report the time breakdown.
    Run(Common),
    /// Compare random freezing with convergence-aware plans.
    Ablate(Common),
    /// Write velocity-difference profiles for path pairs.
    Constancy(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; JANO_WORKERS takes precedence when set.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common, run) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c, None),
        Cmd::Analyze { common, run } => (Command::Analyze, common, run),
        Cmd::Run(c) => (Command::Run, c, None),
        Cmd::Ablate(c) => (Command::Ablate, c, None),
        Cmd::Constancy(c) => (Command::Constancy, c, None),
    };
    match execute(command, &common.config, common.out.as_deref(), common.seed, common.workers, run.as_deref()) {
        Ok(m) => {
            println!("wrote {} files; manifest in {}", m.files.len(), jano_cli::MANIFEST_NAME);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
