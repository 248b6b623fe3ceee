use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvsaddle_cli::{render, run, verify, Format, RunConfig, RunOptions, Singularity};

#[derive(Parser)]
#[command(name = "mvsaddle", version, about = "Saddlepoint tail probabilities for sums of random vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every query of a config file.
    Run(Flags),
    /// Compare each query with its oracle; fails when any misses the tolerance.
    Verify(Flags),
}

#[derive(Args)]
struct Flags {
    config: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Add the oracle value and the relative error.
    #[arg(long)]
    oracle: bool,
    /// Add the normal approximation.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    full_precision: bool,
    #[arg(long, value_enum)]
    singularity_mode: Option<Singularity>,
}

impl Flags {
    fn options(&self) -> RunOptions {
        RunOptions {
            oracle: self.oracle,
            baseline: self.baseline,
            full_precision: self.full_precision,
            format: self.format,
            singularity: self.singularity_mode,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: &Command) -> anyhow::Result<ExitCode> {
    let (flags, checking) = match command {
        Command::Run(f) => (f, false),
        Command::Verify(f) => (f, true),
    };
    let cfg = RunConfig::load(&flags.config)?;
    let opts = flags.options();
    let format = opts.format.unwrap_or(cfg.format);
    let (report, misses) = if checking {
        verify(&cfg, &opts)?
    } else {
        (run(&cfg, &opts)?, Vec::new())
    };
    print!("{}", render(&report, format, opts.full_precision)?);
    for r in report.rows.iter().filter(|r| r.failed()) {
        eprintln!("query {}: {}", r.query, r.error.as_deref().unwrap_or_default());
    }
    if !misses.is_empty() {
        eprintln!("outside tolerance: queries {misses:?}");
    }
    Ok(if report.failures() > 0 || !misses.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}
