use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diagflow::Error;
use diagflow_cli::commands::{self, SpectraArgs};
use diagflow_cli::{ExperimentConfig, Outcome, Overrides};

/// Worker-thread count for parallel runs; defaults to all cores.
const WORKERS_ENV: &str = "DIAGFLOW_WORKERS";

#[derive(Parser)]
#[command(name = "diagflow", version, about = "Incremental learning in networks with diagonal weights")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for data generation, SGD minibatches and perturbations.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Built-in configuration: toy-appendix-a or toy-small.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Initialization scale α (overrides flow.alpha).
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with SGD or integrate the gradient flow; write the trajectory and a summary.
    Simulate,
    /// Compute the stagewise schedule of the small-initialization limit.
    Predict,
    /// Compare flows over an α-sweep with the predicted schedule.
    Compare,
    /// Perturbation checks at plateau and activation epochs of an SGD run.
    ValidateAssumptions,
    /// Stable ranks of learned weight-product perturbations across checkpoints.
    Spectra {
        /// JSON manifest listing checkpoint iterations and matrix files.
        #[arg(long)]
        manifest: PathBuf,
        /// Iteration of the reference checkpoint (default: the smallest).
        #[arg(long)]
        init_iteration: Option<u64>,
        /// Singular-value threshold for the rank columns (default: analysis.tau).
        #[arg(long)]
        tau: Option<f64>,
        /// Number of leading singular values written per product.
        #[arg(long, default_value_t = 8)]
        top_k: usize,
    },
}

fn configure_workers() -> diagflow::Result<()> {
    let Ok(value) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn run(cli: Cli) -> diagflow::Result<Outcome> {
    configure_workers()?;
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        alpha: cli.alpha,
    };
    let cfg = ExperimentConfig::resolve(cli.preset.as_deref(), cli.config.as_deref(), &overrides)?;
    Ok(match cli.command {
        Command::Simulate => commands::simulate(&cfg)?.0,
        Command::Predict => commands::predict(&cfg)?.0,
        Command::Compare => commands::compare(&cfg)?.0,
        Command::ValidateAssumptions => commands::validate_assumptions(&cfg)?.0,
        Command::Spectra {
            manifest,
            init_iteration,
            tau,
            top_k,
        } => {
            let args = SpectraArgs {
                manifest,
                init_iteration,
                tau: tau.unwrap_or(cfg.analysis.tau),
                top_k,
            };
            commands::spectra(&cfg, &args)?.0
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for f in &outcome.files {
                println!("{}", f.display());
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
