//! Command-line front end: `prep`, `train`, `eval`, `topics` and
//! `export-embeddings`.

mod commands;
pub mod config;
pub mod schema;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::model::{DecoderKind, InputTransform};

pub use commands::{
    export_embeddings, run_eval, run_prep, run_topics, run_train, topic_hierarchy, TopicEntry, TopicChild,
    LABEL_NAMES_FILE, METRICS_FILE, RUN_CONFIG_FILE, TOPICS_FILE, TOPIC_NPMI_FILE,
};
pub use config::{parse_layer_widths, resolve, ConfigErrors, RunConfig};

/// Parsed as one comma-separated flag value rather than repeated flags.
pub type Widths = Vec<usize>;

#[derive(Debug, Parser)]
#[command(name = "sawtopics", version, about = "Deep topic modelling with sawtooth-factorized embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize raw text into vocabulary and sparse count files.
    Prep(PrepArgs),
    /// Train a model on a prepared corpus.
    Train(TrainArgs),
    /// Compute perplexity, topic quality and clustering metrics.
    Eval(EvalArgs),
    /// Export per-layer topics and their hierarchy as JSON.
    Topics(TopicsArgs),
    /// Export word and topic embeddings as TSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// A file with one document per line, a directory with one document per
    /// file, or a directory of class subdirectories.
    #[arg(long)]
    pub input: PathBuf,
    /// One label per line, aligned with the documents of a line-per-document file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
    #[arg(long, default_value_t = 10_000)]
    pub max_vocab: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration JSON; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, alias = "output")]
    pub out: Option<PathBuf>,
    /// Comma-separated widths, bottom layer first, or `paper15`.
    #[arg(long, value_parser = parse_layer_widths)]
    pub layer_widths: Option<Widths>,
    #[arg(long)]
    pub variant: Option<DecoderKind>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_transform)]
    pub input_transform: Option<InputTransform>,
    #[arg(long)]
    pub prior_rate: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, env = "SAWTOPICS_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub heldout_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration; defaults to `run.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub heldout_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "ppl,quality,cluster")]
    pub metrics: Vec<crate::eval::Metric>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub top_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub coherence_epsilon: Option<f64>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TopicsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared corpus supplying the vocabulary; defaults to the one named
    /// in `run.json` next to the checkpoint.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// A layer number or `all`.
    #[arg(long, default_value = "all")]
    pub layer: String,
    #[arg(long, default_value_t = 20)]
    pub top_n: usize,
    /// Output file; defaults to `topics.json` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_transform(s: &str) -> Result<InputTransform, String> {
    match s.to_ascii_lowercase().as_str() {
        "raw" => Ok(InputTransform::Raw),
        "log1p" => Ok(InputTransform::Log1p),
        other => Err(format!("unknown input transform {other:?} (expected raw or log1p)")),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prep(a) => run_prep(&a),
        Command::Train(a) => run_train(&a).map(|_| ()),
        Command::Eval(a) => run_eval(&a).map(|_| ()),
        Command::Topics(a) => run_topics(&a).map(|_| ()),
        Command::ExportEmbeddings(a) => export_embeddings(&a),
    }
}
