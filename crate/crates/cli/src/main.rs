//! `compseg`: synthetic data, model fitting, segmentation and evaluation.

mod artifacts;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "compseg", version, about = "Compositional models for weakly-supervised amodal segmentation")]
struct Cli {
    /// Run configuration (JSON). Defaults to the standard synthetic setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-record stages (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the resolved configuration with every default filled in.
    Config {
        /// Start from the 10x10 smoke-test preset instead of the standard one.
        #[arg(long, conflicts_with = "config")]
        small: bool,
    },
    /// Generate a world, its training set, backgrounds and the benchmark.
    Synth {
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Learn the dictionary, context centers, coefficients and priors.
    Init(RunArgs),
    /// Refine the priors by hard EM.
    Refine {
        #[command(flatten)]
        run: RunArgs,
        /// Re-estimate coefficients inside EM (`true`/`false`).
        #[arg(long)]
        refit_coeffs: Option<bool>,
    },
    /// Fine-tune the coefficients by SGD on the weakly supervised losses.
    Train(RunArgs),
    /// Segment every benchmark record: one PGM and one JSON sidecar each.
    Segment(SegmentArgs),
    /// Segment with an ablated prior (`--no-prior` or `--gt-prior`).
    Ablate(SegmentArgs),
    /// Score predictions against the benchmark ground truth.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "run/pred")]
        pred: PathBuf,
        /// Write the per-level table as CSV here as well.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Accept predictions made under a different configuration.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Directory written by `synth`.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Directory holding the model and state files of each stage.
    #[arg(long, default_value = "run")]
    run: PathBuf,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Model file; defaults to the refined model in `run/`.
    #[arg(long, default_value = "run/refined.model.json")]
    model: PathBuf,
    #[arg(long, default_value = "run/pred")]
    out: PathBuf,
    #[arg(long, default_value = "modal")]
    supervision: compseg_core::Supervision,
    /// Replace every prior by the constant `--omega`.
    #[arg(long, conflicts_with = "gt_prior")]
    no_prior: bool,
    /// Constant prior of `--no-prior`; defaults to the configured omega.
    #[arg(long, requires = "no_prior")]
    omega: Option<f64>,
    /// Re-learn priors from the ground-truth training masks.
    #[arg(long)]
    gt_prior: bool,
    /// Training state with the mixture assignments used by `--gt-prior`.
    #[arg(long, default_value = "run/refined.state.json")]
    state: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
