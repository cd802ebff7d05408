//! `lgp`: simulate, fit, score and bootstrap latent Gaussian process curve
//! models from the command line.
//!
//! Exit codes: 0 success, 1 configuration or validation error, 2 I/O error,
//! 3 estimation failure or non-convergence (the fit report is still written).
//! The log level is read from `LGP_LOG` (e.g. `LGP_LOG=debug`).

mod commands;
mod config;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "lgp", version, about = "Latent Gaussian process curve models for EMA data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed for every stochastic stage (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset; writes data.csv, truth.json and config.toml.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the model; writes fit.json, trace.csv and config.toml.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Posterior curves of selected individuals; writes curve_<id>.csv files.
    Curve {
        /// fit.json written by `lgp fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated ids; all individuals when absent.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Replaces the configuration echoed in the fit report.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated quantile levels, e.g. 0.025,0.5,0.975.
        #[arg(long, value_delimiter = ',')]
        quantiles: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Individual-level bootstrap; writes replicates.csv, ci.csv and bootstrap.json.
    Bootstrap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of bootstrap replicates B (overrides the config).
        #[arg(long = "replicates", short = 'B')]
        replicates: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(path: &Path, o: Overrides) -> Result<RunConfig, CliError> {
    RunConfig::load(path)?.resolve(&o)
}

fn init_threads(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out, common } => {
            let cfg = resolve(&config, overrides(&common))?;
            init_threads(&cfg)?;
            commands::simulate(&cfg, &out)
        }
        Command::Fit { config, data, out, common } => {
            let cfg = resolve(&config, overrides(&common))?;
            init_threads(&cfg)?;
            commands::fit(&cfg, &data, &out)
        }
        Command::Curve { fit, data, out, ids, config, quantiles, common } => {
            let o = Overrides { quantiles, ..overrides(&common) };
            let report = commands::read_report(&fit)?;
            let cfg = match config {
                Some(p) => resolve(&p, o)?,
                None => report.config.clone().resolve(&o)?,
            };
            init_threads(&cfg)?;
            commands::curve(&report, &cfg, &data, &ids, &out)
        }
        Command::Bootstrap { config, data, out, replicates, common } => {
            let o = Overrides { replicates, ..overrides(&common) };
            let cfg = resolve(&config, o)?;
            init_threads(&cfg)?;
            commands::bootstrap_cmd(&cfg, &data, &out)
        }
    }
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        threads: c.threads,
        ..Overrides::default()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LGP_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
