//! `egpde`: train, evaluate and inspect exogenous-guided ODE forecasters.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use egpde_core::model::AblationMode;

#[derive(Parser, Debug)]
#[command(name = "egpde", version, about = "Exogenous-guided neural ODE forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed; writes checkpoints and loss histories.
    Train(TrainArgs),
    /// Score checkpoints at arbitrary (including fractional) steps.
    Eval(EvalArgs),
    /// Compare tape gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Export per-variable attention contributions as CSV and SVG.
    Contrib(ContribArgs),
    /// Generate a synthetic dataset or convert a delimited file to the canonical CSV.
    PrepareData(PrepareArgs),
}

#[derive(Args, Debug)]
struct OutputArg {
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long, env = "EGPDE_OUTPUT_DIR")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the model variant: full, no_self_att or no_zx_ode.
    #[arg(long)]
    ablation: Option<AblationMode>,
    /// Override the seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Train the seeds concurrently instead of one after another.
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// One checkpoint per seed; several are aggregated as mean ± std.
    #[arg(long, required = true, num_args = 1..)]
    checkpoint: Vec<PathBuf>,
    /// Run configuration naming the dataset.
    #[arg(long)]
    config: PathBuf,
    /// Forecast steps in resampled-grid units, strictly increasing.
    #[arg(long)]
    steps: Option<String>,
    /// Also score the last-value persistence baseline.
    #[arg(long)]
    baseline: bool,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the tiny model and its inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Evaluate finite differences on the calling thread only.
    #[arg(long)]
    sequential: bool,
    /// Negative control: corrupt one backward rule.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Debug)]
struct ContribArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    output: OutputArg,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[command(subcommand)]
    source: PrepareSource,
}

#[derive(Subcommand, Debug)]
enum PrepareSource {
    /// Target = weighted sum of lagged exogenous sinusoids plus Gaussian noise.
    Synthetic {
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrites a delimited text file as the canonical comma-separated layout.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Field delimiter; runs of spaces count as one when this is a space.
        #[arg(long, default_value = ",")]
        delimiter: char,
        /// Leading columns joined into the timestamp column.
        #[arg(long, default_value_t = 0)]
        timestamp_columns: usize,
        /// Columns to drop, comma separated.
        #[arg(long, value_delimiter = ',')]
        drop: Vec<String>,
        /// Column that must survive conversion (checked after writing).
        #[arg(long)]
        target: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Contrib(a) => commands::contrib(a),
        Command::PrepareData(a) => commands::prepare_data(a.source),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
