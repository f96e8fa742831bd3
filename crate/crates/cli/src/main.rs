mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Parser)]
#[command(
    name = "ltm",
    version,
    about = "Learnable token merging: training, evaluation and diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic blob dataset as IDX files.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a JSON config, or continue a checkpoint.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Overrides the config's checkpoint path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the config's IB report path.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Accuracy, loss and IB terms of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the test set named in the checkpoint's config.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Compare the closed-form IBB gradient with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-epoch IB terms stored in a checkpoint, as CSV.
    IbReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Analytic FLOPs of a model spec.
    Flops {
        #[arg(long)]
        spec: PathBuf,
        /// Replace every stage's merge ratio.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge masks of one block for selected samples, as CSV.
    ExportMask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        block: usize,
        /// Sample indices into the evaluation set.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        samples: Vec<usize>,
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] ltm_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl CliError {
    fn code(&self) -> u8 {
        use ltm_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Check(_) => 4,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) | E::Json(_) | E::EmptyClass { .. } => 2,
                E::Io(_)
                | E::IdxMagic { .. }
                | E::IdxTruncated
                | E::IdxCountMismatch { .. }
                | E::CheckpointMagic
                | E::CheckpointTruncated
                | E::CheckpointVersion(_)
                | E::CheckpointFormat(_) => 3,
                _ => 1,
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData {
            out,
            size,
            classes,
            sigma,
            train_per_class,
            test_per_class,
            seed,
        } => commands::gen_data(&out, size, classes, sigma, train_per_class, test_per_class, seed),
        Command::Train {
            config,
            checkpoint,
            report,
            resume,
        } => commands::train(config.as_deref(), checkpoint, report, resume.as_deref()),
        Command::Eval {
            checkpoint,
            images,
            labels,
            json,
        } => commands::eval(&checkpoint, images.zip(labels), json),
        Command::Gradcheck { trials, seed } => commands::gradcheck(trials, seed),
        Command::IbReport { checkpoint, out } => commands::ib_report(&checkpoint, out.as_deref()),
        Command::Flops { spec, ratio, csv, out } => commands::flops(&spec, ratio, csv, out.as_deref()),
        Command::ExportMask {
            checkpoint,
            block,
            samples,
            images,
            labels,
            out,
        } => commands::export_mask(&checkpoint, block, &samples, images.zip(labels), out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
