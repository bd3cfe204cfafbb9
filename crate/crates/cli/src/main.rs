mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use scenesynth::autodiff::AutodiffError;
use scenesynth::environment::DomainTag;
use scenesynth::model::ModelError;
use scenesynth::trainer::TrainError;

use commands::UsageError;

/// Synthetic scene-graph datasets and sim-to-real training.
#[derive(Parser)]
#[command(name = "scenesynth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Render a dataset from the source or target domain config.
    Gen {
        #[arg(long, value_enum)]
        domain: Domain,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write graphs for a target dataset (held-out evaluation splits only).
        #[arg(long)]
        with_labels: bool,
    },
    /// Train on unlabeled target images.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        target_dir: PathBuf,
        /// Labeled held-out target split, used only for reporting.
        #[arg(long)]
        eval_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict scene graphs for every image of a dataset.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the checkpoint path with a .json extension.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift scene graphs to 3D scenes and render them.
    Reconstruct {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score predicted graphs against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = commands::default_ks())]
        ks: Vec<usize>,
    },
    /// Empirical source/target risks and label gap of a model.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config (the defaults when --config is absent).
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(TrainError::Numeric { .. }) = cause.downcast_ref::<TrainError>() {
            return EXIT_NUMERIC;
        }
        if let Some(AutodiffError::NumericFailure { .. }) = cause.downcast_ref::<AutodiffError>() {
            return EXIT_NUMERIC;
        }
        if let Some(ModelError::Autodiff(AutodiffError::NumericFailure { .. })) = cause.downcast_ref::<ModelError>() {
            return EXIT_NUMERIC;
        }
    }
    EXIT_DATA
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { domain, config, out, count, seed, with_labels } => {
            let domain = match domain {
                Domain::Source => DomainTag::Source,
                Domain::Target => DomainTag::Target,
            };
            if with_labels && matches!(domain, DomainTag::Source) {
                log::info!("source datasets are always labeled");
            }
            commands::gen(commands::GenArgs { domain, config: config.as_deref(), out: &out, count, seed, with_labels })
        }
        Command::Train { config, target_dir, eval_dir, out } => commands::train(commands::TrainArgs {
            config: config.as_deref(),
            target_dir: &target_dir,
            eval_dir: eval_dir.as_deref(),
            out: &out,
        }),
        Command::Infer { model, sidecar, config, images, out } => commands::infer(commands::InferArgs {
            model: &model,
            sidecar: sidecar.as_deref(),
            config: config.as_deref(),
            images: &images,
            out: &out,
        }),
        Command::Reconstruct { graphs, config, out, seed } => {
            commands::reconstruct(commands::ReconstructArgs { graphs: &graphs, config: config.as_deref(), out: &out, seed })
        }
        Command::Eval { pred, gt, out, ks } => commands::eval(commands::EvalArgs { pred: &pred, gt: &gt, out: &out, ks: &ks }),
        Command::Diagnose { model, sidecar, source, target, out } => commands::diagnose(commands::DiagnoseArgs {
            model: &model,
            sidecar: sidecar.as_deref(),
            source: &source,
            target: &target,
            out: &out,
        }),
        Command::Config { config } => commands::print_config(config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
