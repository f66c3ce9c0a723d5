//! `orthoproto` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure. Errors are printed as a readable line followed by a
//! one-line JSON record on stderr.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orthoproto::Error;

#[derive(Parser, Debug)]
#[command(name = "orthoproto", version, about = "Dual-branch prototype learning for open-set recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Seed for every random choice of the command [default: from --config, else 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing) [default: from --config, else "out"]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with the command's full configuration; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic open-set dataset (dataset.csv + dataset.meta.json)
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Split a dataset into known, background and unknown classes (split.json)
    Split {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV (vector or signal schema)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Number of known classes [default: 8]
        #[arg(long)]
        n_known: Option<usize>,
        /// Share of each known class held out for testing [default: 0.3]
        #[arg(long)]
        test_fraction: Option<f64>,
        /// Also hold out part of the background class as test unknowns
        #[arg(long)]
        include_background_in_test: bool,
        /// Window length for signal CSVs [default: 32]
        #[arg(long)]
        window: Option<usize>,
        /// Window stride for signal CSVs [default: 16]
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train a model and write a run directory
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset CSV; generated from the config when omitted
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split manifest; drawn from the config when omitted
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split's test set
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Rejection threshold on the score; writes decisions.csv when set
        #[arg(long)]
        threshold: Option<f64>,
        /// combined, single_branch, pl_similarity or softmax_confidence [default: combined]
        #[arg(long)]
        rule: Option<String>,
        /// Histogram bin count [default: 50]
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Run an ablation suite over several seeds
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Suite name [default: table3]
        #[arg(long)]
        suite: Option<String>,
        /// Number of seeds, counted up from --seed [default: 5]
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Finite-difference check of every loss term
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random problems to check [default: 10]
        #[arg(long)]
        points: Option<usize>,
    },
    /// Score every sample of a dataset (scores.csv)
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split manifest used to mark known samples and remap their labels
        #[arg(long)]
        split: Option<PathBuf>,
        /// Rejection threshold on C_max; writes decisions.csv when set
        #[arg(long)]
        threshold: Option<f64>,
    },
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            kind: "numeric",
            message: message.into(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Split {
            common,
            dataset,
            n_known,
            test_fraction,
            include_background_in_test,
            window,
            stride,
        } => commands::split(
            &common,
            config::SplitFlags {
                dataset,
                n_known,
                test_fraction,
                include_background_in_test,
                window,
                stride,
            },
        ),
        Command::Train { common, dataset, split } => commands::train(&common, dataset, split),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            split,
            threshold,
            rule,
            bins,
        } => commands::eval(
            &common,
            config::EvalFlags {
                checkpoint,
                dataset,
                split,
                threshold,
                rule,
                bins,
            },
        ),
        Command::Ablate { common, suite, seeds } => commands::ablate(&common, suite, seeds),
        Command::Gradcheck { common, points } => commands::gradcheck(&common, points),
        Command::Score {
            common,
            checkpoint,
            dataset,
            split,
            threshold,
        } => commands::score(&common, checkpoint, dataset, split, threshold),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                report(&Failure::usage(e.kind().to_string()));
            }
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            report(&f);
            ExitCode::from(f.code)
        }
    }
}

fn report(f: &Failure) {
    let record = serde_json::json!({
        "error": { "kind": f.kind, "message": f.message, "exit_code": f.code }
    });
    eprintln!("{record}");
}
