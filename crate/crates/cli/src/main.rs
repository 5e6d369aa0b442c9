//! `nngp-ldp` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nngp_ldp::experiment::{run_experiment, ExperimentConfig};
use nngp_ldp::Error;

#[derive(Parser)]
#[command(name = "nngp-ldp", version, about = "Covariance chains, NNGP limits and large-deviation rates of wide Gaussian networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; results do not depend on this.
        #[arg(long, env = "NNGP_LDP_WORKERS")]
        workers: Option<usize>,
    },
    /// Parse and validate a config without running it.
    Validate { config: PathBuf },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_RUNTIME),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    let cfg = ExperimentConfig::from_path(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(cfg) => {
                println!("ok: {} experiment, seed {}", cfg.experiment.name(), cfg.seed);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run { config, seed, out, workers } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            if workers == Some(0) {
                return fail(&Error::Config("workers: must be >= 1".into()));
            }
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(k) = workers {
                pool = pool.num_threads(k);
            }
            let pool = match pool.build() {
                Ok(p) => p,
                Err(e) => return fail(&Error::Internal(format!("thread pool: {e}"))),
            };
            match pool.install(|| run_experiment(&cfg, None)) {
                Ok(outcome) => {
                    print!("{}", outcome.summary);
                    println!("artifacts written to {}", outcome.output_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
