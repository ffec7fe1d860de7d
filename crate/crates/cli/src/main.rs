use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand};
use mixamp_cli::output::{write_outputs, Input};
use mixamp_cli::{execute, selfcheck, Command};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mixamp", version, about = "AMP experiments for matrix generalized linear models")]
struct Cli {
    #[command(subcommand)]
    command: Action,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Exit with status 3 if any repeat or state-evolution run fails numerically.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory; overrides the config (default: "out").
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Action {
    /// AMP runs with state-evolution predictions over a parameter grid.
    Sweep { config: PathBuf },
    /// Sparse-prior (δ, ε) grid summarized as min-over-signals correlation.
    Heatmap { config: PathBuf },
    /// EM-AMP intercept estimation for max-affine regression.
    EmAmp { config: PathBuf },
    /// Runs the oracle diagnostics.
    Selfcheck,
}

enum Failure {
    Config(String),
    Other(anyhow::Error),
}

fn run(cli: &Cli, command: Command, path: &PathBuf) -> Result<bool, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Other)?;
    let mut config = Input::parse(&text)
        .and_then(|i| i.into_config(command))
        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let start = Instant::now();
    let outcome = execute(command, &config).map_err(Failure::Config)?;
    let threads = rayon::current_num_threads();
    let written = write_outputs(&dir, command, &config, &outcome, threads, start.elapsed().as_secs_f64())
        .map_err(Failure::Other)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    let failures = outcome.numerical_failures();
    if failures > 0 {
        eprintln!("{failures} run(s) failed numerically; see the status column and manifest");
    }
    Ok(failures == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    let (command, path) = match &cli.command {
        Action::Sweep { config } => (Command::Sweep, config),
        Action::Heatmap { config } => (Command::Heatmap, config),
        Action::EmAmp { config } => (Command::EmAmp, config),
        Action::Selfcheck => {
            let checks = selfcheck::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NUMERICAL)
            };
        }
    };
    match run(&cli, command, path) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) if cli.strict => ExitCode::from(EXIT_NUMERICAL),
        Ok(false) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
