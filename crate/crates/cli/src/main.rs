use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conal::classifier::LossKind;
use conal::corpus::CorpusFormat;
use conal::eval::sweep::SweepKind;

mod commands;
mod config;
mod run;

use config::{BackendKind, GenerateMode};

/// Open-set selective text classification with generated novel examples.
#[derive(Parser, Debug)]
#[command(name = "conal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; commands that use one seed take the first.
    #[arg(long, value_delimiter = ',', global = true)]
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    oe_weight: Option<f64>,
    #[arg(long)]
    ls_alpha: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Hashed feature dimension (a power of two).
    #[arg(long)]
    dimension: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic keyword-topic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        docs_per_topic: usize,
        /// Subset of topic names; all when omitted.
        #[arg(long, value_delimiter = ',')]
        topics: Vec<String>,
        #[arg(long, default_value = "synth")]
        prefix: String,
        #[command(flatten)]
        common: Common,
    },
    /// Hold out classes and write train / id_test / ood_test files.
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        format: Option<CorpusFormat>,
        #[arg(long, value_delimiter = ',')]
        heldout: Option<Vec<String>>,
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long)]
        label_map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a novel set from a split's training data.
    Generate {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<GenerateMode>,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        quota: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        thesaurus: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        concurrency: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a classifier on a split, optionally with a novel set.
    Train {
        #[arg(long)]
        split: PathBuf,
        /// Novelty-set file or labeled corpus (JSONL, CSV or TSV).
        #[arg(long)]
        novelty: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Score a split's test sets and write report, curve and profile.
    Eval {
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a sweep harness and write its table.
    Sweep {
        #[arg(long)]
        kind: SweepKind,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        novelty: Option<PathBuf>,
        /// Novel-class pool for noise mixtures.
        #[arg(long)]
        ood_pool: Option<PathBuf>,
        /// Closed-set noise pool for noise mixtures; the training set when
        /// omitted.
        #[arg(long)]
        id_pool: Option<PathBuf>,
        /// Fractions, quotas or sizes depending on the kind.
        #[arg(long, value_delimiter = ',')]
        settings: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        losses: Option<Vec<LossKind>>,
        #[arg(long)]
        novelty_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize evaluation reports and sweep tables of run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
