//! Command-line front end: estimate couplings, train score models against
//! them, generate conditional samples, and run the 1-D sweep end to end.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use otcs::cli;
use otcs::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "otcs", about = "Coupling-guided conditional diffusion at desk scale")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dual potentials and write their checkpoint and logs.
    FitOt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the discrete instance exactly and diff the reconstructed plan.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        potentials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional score model (or the unconditional baseline).
    FitScore {
        #[arg(long)]
        config: PathBuf,
        /// Potentials checkpoint (required unless --unconditional).
        #[arg(long)]
        potentials: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train the baseline on the targets alone.
        #[arg(long)]
        unconditional: bool,
    },
    /// Generate samples for each condition row of a CSV file.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        conditions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample with compatibility guidance instead of a conditional
        /// model; needs the potentials checkpoint.
        #[arg(long)]
        scones_potentials: Option<PathBuf>,
    },
    /// Run the full 1-D sweep: potentials, conditional and baseline models,
    /// both samplers, expected-W2 metrics, histograms.
    ReproduceFig2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(args: Args) -> otcs::Result<()> {
    match args.command {
        Command::FitOt { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ckpt = cli::cmd_fit_ot(&cfg, &out)?;
            println!("potentials checkpoint: {}", ckpt.display());
        }
        Command::Oracle { config, potentials, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cli::cmd_oracle(&cfg, &potentials, &out)?;
            println!("plan L1 distance: {:.6}", report.l1_distance);
        }
        Command::FitScore { config, potentials, out, unconditional } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ckpt = cli::cmd_fit_score(&cfg, potentials.as_deref(), &out, unconditional)?;
            println!("score checkpoint: {}", ckpt.display());
        }
        Command::Sample { config, model, conditions, out, scones_potentials } => {
            let cfg = ExperimentConfig::load(&config)?;
            let path =
                cli::cmd_sample(&cfg, &model, &conditions, &out, scones_potentials.as_deref())?;
            println!("samples: {}", path.display());
        }
        Command::ReproduceFig2 { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cli::cmd_reproduce_fig2(&cfg, &out)?;
            for eps in &report.per_eps {
                println!(
                    "epsilon {:>8.0e}: expected W2 otcs {:.4} vs scones {:.4}",
                    eps.epsilon, eps.otcs.gaussian, eps.scones.gaussian
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({ "kind": err.kind(), "error": err.to_string() });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
