//! `dtl`: simulate naive-Bayes domains, measure their divergence, train
//! transfer models, run sweeps and plot the results.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dtl_core::divergence::LambdaSchedule;
use dtl_core::harness::Algorithm;
use dtl_core::plot::PlotFilter;

use commands::InputError;

const OUTPUT_ROOT_ENV: &str = "DTL_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "dtl-output";

#[derive(Parser)]
#[command(
    name = "dtl",
    version,
    about = "Synthetic transfer-learning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a target model, perturbed source models and CSV datasets.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
        out: PathBuf,
        /// Perturbation scale; repeat for several source models.
        #[arg(long = "sigma", allow_negative_numbers = true)]
        sigmas: Vec<f64>,
        #[arg(long)]
        base_seed: Option<u64>,
        /// Use an existing target model instead of generating one.
        #[arg(long)]
        target_model: Option<PathBuf>,
        #[arg(long)]
        n_features: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        /// Seed of the generated target model.
        #[arg(long)]
        model_seed: Option<u64>,
        /// Row count for every sampled dataset.
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Print KL(p || q) between two naive-Bayes model files.
    Kl { p: PathBuf, q: PathBuf },
    /// Train one model on CSV datasets.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
        out: PathBuf,
        #[arg(long)]
        algorithm: Option<Algorithm>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Model file that fixes feature arities and the class count.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        kl: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// fixed(x), kl_direct or bounded(alpha).
        #[arg(long)]
        lambda: Option<LambdaSchedule>,
    },
    /// Print the accuracy of a trained model on a labeled CSV dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an experiment grid and store results under a run directory.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Root under which the run directory is created.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = DEFAULT_OUTPUT_ROOT)]
        out: PathBuf,
        /// Worker threads (0: one per core). Does not affect results.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Print the number of result rows and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        base_seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "algorithm")]
        algorithms: Vec<Algorithm>,
        #[arg(long = "sigma", allow_negative_numbers = true)]
        sigmas: Vec<f64>,
        #[arg(long = "target-size")]
        target_sizes: Vec<usize>,
    },
    /// Render an SVG chart from a results CSV.
    Plot {
        #[arg(long)]
        results: PathBuf,
        /// acc_vs_kl or model_comparison.
        #[arg(long, default_value = "acc_vs_kl")]
        figure: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "algorithm")]
        algorithms: Vec<String>,
        #[arg(long = "target-size")]
        target_sizes: Vec<usize>,
        #[arg(long = "lambda-schedule")]
        lambda_schedules: Vec<String>,
    },
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            sigmas,
            base_seed,
            target_model,
            n_features,
            classes,
            model_seed,
            rows,
        } => commands::simulate(commands::SimulateArgs {
            config,
            out,
            sigmas,
            base_seed,
            target_model,
            n_features,
            classes,
            model_seed,
            rows,
        }),
        Command::Kl { p, q } => commands::kl(&p, &q),
        Command::Train {
            config,
            out,
            algorithm,
            source,
            target,
            model,
            kl,
            epochs,
            seed,
            lambda,
        } => commands::train(commands::TrainArgs {
            config,
            out,
            algorithm,
            source,
            target,
            model,
            kl,
            epochs,
            seed,
            lambda,
        }),
        Command::Eval { model, data } => commands::eval(&model, &data),
        Command::Sweep {
            config,
            out,
            workers,
            dry_run,
            replicates,
            base_seed,
            epochs,
            algorithms,
            sigmas,
            target_sizes,
        } => commands::sweep(commands::SweepArgs {
            config,
            out,
            workers,
            dry_run,
            replicates,
            base_seed,
            epochs,
            algorithms,
            sigmas,
            target_sizes,
        }),
        Command::Plot {
            results,
            figure,
            out,
            algorithms,
            target_sizes,
            lambda_schedules,
        } => commands::plot(commands::PlotArgs {
            results,
            figure,
            out,
            filter: PlotFilter {
                algorithms,
                target_sizes,
                lambda_schedules,
            },
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
