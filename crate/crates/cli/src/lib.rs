//! The `enrichrec` command-line pipeline.

mod commands;
pub mod output;
pub mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub use commands::run_command;

#[derive(Debug, Parser)]
#[command(name = "enrichrec", version, about = "Sequential recommendation with imaginary history items")]
pub struct Cli {
    /// `key = value` file with defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and index a raw interaction log into a corpus container.
    Ingest(IngestArgs),
    /// Train the masked-item enricher.
    TrainEnricher(TrainEnricherArgs),
    /// Train the next-item recommender on leave-one-out prefixes.
    TrainRecommender(TrainRecommenderArgs),
    /// Evaluate one or more test scenarios over repeated runs.
    Scenario(ScenarioArgs),
    /// Evaluate random placement over a grid of mask percentages.
    Sweep(SweepArgs),
    /// Count imaginary items per scenario without scoring.
    Accounting(AccountingArgs),
    /// Collect summary CSVs into one mean/std table.
    Report(ReportArgs),
    /// Write a synthetic Amazon-style review log.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `jsonl` or `csv`.
    #[arg(long)]
    pub format: Option<String>,
    /// `amazon` or `user=<field>,item=<field>,time=<field>`.
    #[arg(long)]
    pub map: Option<String>,
    #[arg(long)]
    pub min_actions: Option<usize>,
    /// `fail` or `skip`.
    #[arg(long)]
    pub on_bad_row: Option<String>,
    /// Name recorded in outputs; defaults to the input file stem.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Stats CSV; defaults to `<out>.stats.csv`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainEnricherArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainRecommenderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

/// Options shared by the evaluating commands.
#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub recommender: PathBuf,
    #[arg(long)]
    pub enricher: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Sampled negatives per user.
    #[arg(long)]
    pub negatives: Option<usize>,
    /// Cut-off for HR@k and NDCG@k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Retrain the recommender in every run with the run's seed.
    #[arg(long)]
    pub retrain_per_run: bool,
    /// Retrain the recommender on the scenario's edited prefixes.
    #[arg(long)]
    pub retrain_on_enriched: bool,
    /// Draw fresh evaluation negatives in every run.
    #[arg(long)]
    pub redraw_negatives: bool,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Scenario number 1-9; repeatable.
    #[arg(long = "id")]
    pub ids: Vec<u8>,
    /// Run scenarios 1-9.
    #[arg(long)]
    pub all: bool,
    /// Fraction of recent items dropped by scenario 1.
    #[arg(long)]
    pub remove_percent: Option<f64>,
    /// Writes `results.csv`, `summary.csv` and `accounting.csv`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also store each scenario's first-run inputs as corpus containers.
    #[arg(long)]
    pub save_enriched: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated mask percentages.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AccountingArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub enricher: PathBuf,
    /// Scenario numbers; defaults to 3-9.
    #[arg(long = "id")]
    pub ids: Vec<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Summary CSVs written by `scenario`.
    #[arg(long = "summary", required = true)]
    pub summaries: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
}

/// Process exit status for a failed command: 3 for numeric failures
/// (divergence, non-finite values), 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .any(|cause| cause.downcast_ref::<enrichrec::Error>().is_some_and(enrichrec::Error::is_numeric));
    if numeric {
        3
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    run_command(cli)
}
