//! Batch front end: reads an experiment manifest, runs it and writes CSV/JSON
//! artifacts together with a replay manifest.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use obsdrive::covariates::CovariateError;
use obsdrive::engine::EngineError;
use obsdrive::verify::VerifyError;
use thiserror::Error;

use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Covariate(#[from] CovariateError),
}

#[derive(Debug, Parser)]
#[command(name = "obsdrive", version, about = "Run an observation-driven model experiment from a JSON manifest")]
struct Args {
    /// Experiment manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; overrides the manifest's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed; overrides the manifest's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replica-parallel work.
    #[arg(long)]
    threads: Option<usize>,
}

fn execute(args: Args) -> Result<i32, CliError> {
    let mut manifest = Manifest::load(&args.manifest)?;
    if let Some(seed) = args.seed {
        manifest.seed = seed;
    }
    let dir = args
        .out
        .or_else(|| manifest.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
    let manifest = manifest.resolve()?;
    let job = || commands::run(manifest, &dir);
    let (_, outcome) = match args.threads {
        Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(e.to_string()))?
            .install(job)?,
        None => job()?,
    };
    println!("{}", outcome.summary);
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
