//! Command-line entry points for fitting, simulating, selecting, forecasting,
//! bootstrapping, and exporting grids.
//!
//! Every command is a pure function of its inputs and seeds; reruns produce
//! byte-identical outputs. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "stfpca",
    about = "Functional PCA for serially correlated surfaces on triangulated domains",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model described by a run configuration.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Freeze the AR coefficients at zero (serially independent baseline).
        #[arg(long = "freeze-k")]
        freeze_k: bool,
        /// Seed for cross-validation when penalties.mode = select.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the simulation benchmark and write the comparison table.
    Simulate {
        /// Setup identifier: i, ii, iii, iv, or all.
        #[arg(long, default_value = "i")]
        setup: String,
        /// Variance level: high, low, or both.
        #[arg(long, default_value = "high")]
        variance: String,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the number of time points (default 500).
        #[arg(long = "n-times")]
        n_times: Option<usize>,
        /// Comma-separated estimators to run.
        #[arg(long, default_value = "sfpc,mfpc")]
        methods: String,
    },
    /// Select regularization weights (and optionally the AR order and the
    /// component count) by cross validation.
    CvSelect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Total objective-evaluation budget for the search.
        #[arg(long)]
        budget: Option<usize>,
        /// Comma-separated AR orders to compare after the penalty search.
        #[arg(long = "p-candidates")]
        p_candidates: Option<String>,
        /// Information criterion for the order choice: aic or bic.
        #[arg(long, default_value = "aic")]
        criterion: String,
        /// Proportion-of-variance threshold for the component count.
        #[arg(long = "j-threshold")]
        j_threshold: Option<f64>,
    },
    /// Forecast surfaces beyond the fitted window.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 12)]
        horizon: usize,
        /// Long-format CSV with future observations (absolute time indices)
        /// for the per-month error table.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 51)]
        nx: usize,
        #[arg(long, default_value_t = 51)]
        ny: usize,
    },
    /// Bootstrap standard-deviation surfaces for the components.
    Bootstrap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 51)]
        nx: usize,
        #[arg(long, default_value_t = 51)]
        ny: usize,
    },
    /// Export fitted surfaces on an evaluation grid.
    ExportGrid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 51)]
        nx: usize,
        #[arg(long, default_value_t = 51)]
        ny: usize,
        /// What to export: pcs, mean, or surfaces.
        #[arg(long, default_value = "pcs")]
        what: String,
        /// Comma-separated time indices for mean/surfaces exports.
        #[arg(long)]
        times: Option<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit { config, freeze_k, seed } => commands::cmd_fit(config, *freeze_k, *seed),
        Command::Simulate { setup, variance, runs, seed, out, n_times, methods } => {
            commands::cmd_simulate(setup, variance, *runs, *seed, out, *n_times, methods)
        }
        Command::CvSelect { config, seed, budget, p_candidates, criterion, j_threshold } => {
            commands::cmd_cv_select(
                config,
                *seed,
                *budget,
                p_candidates.as_deref(),
                criterion,
                *j_threshold,
            )
        }
        Command::Forecast { config, model, horizon, truth, nx, ny } => {
            commands::cmd_forecast(config, model, *horizon, truth.as_deref(), *nx, *ny)
        }
        Command::Bootstrap { config, model, replicates, seed, nx, ny } => {
            commands::cmd_bootstrap(config, model, *replicates, *seed, *nx, *ny)
        }
        Command::ExportGrid { model, out, nx, ny, what, times } => {
            commands::cmd_export_grid(model, out, *nx, *ny, what, times.as_deref())
        }
    };
    if let Err(error) = outcome {
        eprintln!("error: {error}");
        std::process::exit(error.exit_code());
    }
}
