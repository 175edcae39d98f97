//! Batch front-end: parse a TOML run configuration, execute the requested
//! job, and write human-readable output plus reproducible CSV artifacts.

mod config;
mod jobs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::JobKind;
use jobs::AppError;

#[derive(Parser)]
#[command(
    name = "ilat",
    about = "Multi-asset option pricing on irregular grids with adaptive Gaussian-mixture interpolation"
)]
struct Cli {
    /// Run configuration (TOML); the config's `job` field picks the job
    /// unless a subcommand overrides it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores). Output is identical for any value.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Directory for CSV/surface/manifest artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    job: Option<JobCmd>,
}

#[derive(Subcommand, Clone, Copy)]
enum JobCmd {
    /// Price via the grid pricer and export the fitted surfaces.
    Price,
    /// Price plus Monte Carlo lower/upper bounds.
    Bounds,
    /// Compare the pricer with every applicable reference method.
    Benchmark,
    /// Verify the greedy-approximation error bound on synthetic targets.
    RateCheck,
}

fn run(cli: Cli) -> Result<(), AppError> {
    let path = cli
        .config
        .ok_or_else(|| AppError::Config("--config <file> is required".into()))?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = config::parse_config(&text).map_err(AppError::Config)?;
    if let Some(seed) = cli.seed {
        // flags override individual config leaves
        cfg.seed = seed;
        cfg.pricer.seed = seed;
        cfg.pricer.fit.seed = seed;
        cfg.bounds.seed = seed;
    }
    let job = match cli.job {
        Some(JobCmd::Price) => JobKind::Price,
        Some(JobCmd::Bounds) => JobKind::Bounds,
        Some(JobCmd::Benchmark) => JobKind::Benchmark,
        Some(JobCmd::RateCheck) => JobKind::RateCheck,
        None => cfg.job,
    };
    jobs::dispatch(&cfg, job, cli.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(workers) = cli.workers {
        if workers > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global()
            {
                eprintln!("error: could not configure {workers} workers: {e}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
