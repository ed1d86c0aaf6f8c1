//! `gcalc`: batch front-end for the sublinear-expectation engine.
//!
//! Exit codes: 0 when every check holds, 1 when any check fails, 2 for
//! configuration errors.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Command;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "gcalc",
    version,
    about = "Sublinear-expectation calculus engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solver expectation next to its Monte Carlo lower bound, per payoff.
    Expect(RunArgs),
    /// Conditional expectation at a configured stage and observation.
    Conditional(RunArgs),
    /// Martingale decomposition summaries and reconstruction checks.
    Decompose(RunArgs),
    /// Raw path simulation statistics per control.
    Simulate(RunArgs),
    /// Inequality verification suite.
    Verify(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write report.json (and scalars.csv with --format csv) here instead of
    /// printing to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: json, or csv to also emit the scalar table.
    #[arg(long, default_value = "json")]
    format: Format,
    /// Worker threads (falls back to GCALC_THREADS, then all cores).
    #[arg(long, env = "GCALC_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Sub::Expect(a) => (Command::Expect, a),
        Sub::Conditional(a) => (Command::Conditional, a),
        Sub::Decompose(a) => (Command::Decompose, a),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Verify(a) => (Command::Verify, a),
    };
    match execute(&command, args) {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: &Command, args: &RunArgs) -> Result<ExitCode, String> {
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.sim.seed = seed;
    }

    let report = match args.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| format!("threads: {e}"))?;
            pool.install(|| commands::run(command, cfg, args.out.as_deref()))?
        }
        None => commands::run(command, cfg, args.out.as_deref())?,
    };

    let json = report.to_json();
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| format!("out: cannot create {}: {e}", dir.display()))?;
            let path = dir.join("report.json");
            std::fs::write(&path, &json)
                .map_err(|e| format!("out: cannot write {}: {e}", path.display()))?;
            if matches!(args.format, Format::Csv) {
                let csv_path = dir.join("scalars.csv");
                std::fs::write(&csv_path, report.scalars_csv())
                    .map_err(|e| format!("out: cannot write {}: {e}", csv_path.display()))?;
            }
            eprintln!("wrote {}", dir.join("report.json").display());
        }
        None => {
            println!("{json}");
            if matches!(args.format, Format::Csv) {
                println!("{}", report.scalars_csv());
            }
        }
    }
    Ok(ExitCode::from(report.exit_code() as u8))
}
