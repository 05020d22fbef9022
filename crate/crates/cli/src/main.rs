//! `marscost`: simulate, label, train, evaluate and export from one run
//! configuration file.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "marscost",
    version,
    about = "Self-supervised traversability costmaps from simulated rover drives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Base directory for every configured path [default: current directory].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate terrain and drive every configured run.
    Simulate(Common),
    /// Derive normalized traversability labels from the simulated runs.
    Label(Common),
    /// Train the costmap regressor and write a checkpoint plus loss log.
    Train(Common),
    /// Score the checkpoint on the held-out samples.
    Eval(Common),
    /// Run the ablation suite on the held-out samples.
    Ablate(Common),
    /// Write predicted and label costmaps of the held-out samples.
    Export(Common),
}

type Step = fn(&commands::Context) -> anyhow::Result<()>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, run): (&str, &Common, Step) = match &cli.command {
        Command::Simulate(c) => ("simulate", c, commands::simulate),
        Command::Label(c) => ("label", c, commands::label),
        Command::Train(c) => ("train", c, commands::train),
        Command::Eval(c) => ("eval", c, commands::eval),
        Command::Ablate(c) => ("ablate", c, commands::ablate),
        Command::Export(c) => ("export", c, commands::export),
    };
    let result = commands::Context::load(&common.config, common.seed, common.out.as_deref())
        .and_then(|ctx| run(&ctx));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("marscost {name}: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
