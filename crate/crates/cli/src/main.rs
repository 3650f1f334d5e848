use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use epse_cli::{execute, load_config, Subcommand};

/// EP Monte Carlo harness: runs, state evolution and verification suites.
#[derive(Parser, Debug)]
#[command(name = "epse", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set prior.p=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for concurrent trials.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Run,
    Se,
    ThresholdScan,
    VerifyHaar,
    VerifyConditioning,
    VerifyDenoiser,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Run => Subcommand::Run,
            Command::Se => Subcommand::Se,
            Command::ThresholdScan => Subcommand::ThresholdScan,
            Command::VerifyHaar => Subcommand::VerifyHaar,
            Command::VerifyConditioning => Subcommand::VerifyConditioning,
            Command::VerifyDenoiser => Subcommand::VerifyDenoiser,
        }
    }
}

fn main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    let config = load_config(&cli.config, &cli.overrides)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    let outcome = execute(cli.command.into(), &config, cli.workers, cli.out.as_deref())?;
    for c in &outcome.checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {:.4e} (tolerance {:.4e}) {}", c.name, c.worst, c.tolerance, c.detail);
    }
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    Ok(if outcome.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
