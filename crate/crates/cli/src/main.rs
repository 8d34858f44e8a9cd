//! `unitary-mesh`: run seeded batches of device configurations, sweep the
//! finite-difference step, project trajectories, and self-check the numerics.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{DeltaList, FlatConfig};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "unitary-mesh", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a batch of trials and write traces, summary and manifest
    Run(ConfigArgs),
    /// Repeat a forward-difference batch for several probe steps
    Sweep(SweepArgs),
    /// Project one trial's path onto its principal plane and sample the loss
    Landscape(LandscapeArgs),
    /// Check gradients and distance invariants on a device
    Check(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON config; flags override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flat: FlatConfig,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated probe steps [default: 2^-6,2^-9,2^-12,2^-15,2^-18]
    #[arg(long)]
    deltas: Option<DeltaList>,
    #[command(flatten)]
    inner: ConfigArgs,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Output directory of a `run` made with --record-history
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    trial: usize,
    /// Grid points per axis
    #[arg(long, default_value_t = 41)]
    resolution: usize,
    /// Write here instead of <dir>/trajectory.json
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(self) -> CliResult<FlatConfig> {
        FlatConfig::resolve(self.config.as_deref(), self.flat)
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(args) => {
            let m = commands::run(&args.resolve()?)?;
            println!("{}", m.output_dir.display());
        }
        Command::Sweep(args) => {
            let m = commands::sweep(&args.inner.resolve()?, args.deltas)?;
            println!("{}", m.output_dir.display());
        }
        Command::Landscape(args) => {
            let path = commands::landscape(&args.dir, args.trial, args.resolution, args.out)?;
            println!("{}", path.display());
        }
        Command::Check(args) => {
            let r = commands::check(&args.resolve()?)?;
            let text = serde_json::to_string_pretty(&r).map_err(|e| CliError::Numeric(e.to_string()))?;
            println!("{text}");
            if !r.passed {
                let failed: Vec<&str> =
                    r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::Numeric(format!("checks failed: {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
