//! `retro` command-line pipeline: datastore and index building, training, QA
//! fine-tuning, generation and evaluation.
//!
//! [`run`] is the whole program; the binary only forwards `argv` and exits with
//! its return value.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
mod manifest;

pub use config::RunConfig;
pub use manifest::{RunManifest, TOOL_VERSION};

/// Exit code for malformed invocations.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for I/O and validation failures.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(retro_core::Error),
}

impl From<retro_core::Error> for CliError {
    fn from(e: retro_core::Error) -> Self {
        CliError::Failed(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "retro", version, about = "Retrieval-augmented language modelling at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Chunk and embed a JSONL corpus into a datastore directory.
    BuildDb(BuildDbArgs),
    /// Train the compressed nearest-neighbor index over a datastore.
    BuildIndex(BuildIndexArgs),
    /// Pretrain a model on the datastore documents.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on question answering data.
    FinetuneQa(FinetuneQaArgs),
    /// Sample continuations with retrieval.
    Generate(GenerateArgs),
    /// Compute text-quality metrics over a generations file.
    Eval(EvalArgs),
    /// Exact-match evaluation of greedy answers on a QA file.
    QaEval(QaEvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed used when no configuration file is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct BuildDbArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// JSONL corpus of {"id", "text"} documents.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub chunk_size: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub db: PathBuf,
    /// Index file; defaults to `index.bin` inside the datastore directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ncentroids: Option<usize>,
    /// PQ subquantizers.
    #[arg(long = "M")]
    pub m_sub: Option<usize>,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub nprobe: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct RetrievalArgs {
    /// Datastore directory.
    #[arg(long)]
    pub db: Option<PathBuf>,
    /// Index file; defaults to `index.bin` inside the datastore directory.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Search the datastore exhaustively instead of through the index.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Output directory for the checkpoint and run manifest.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FinetuneQaArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// QA JSONL with question, answers and passages.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "A")]
    pub template: String,
    /// Checkpoint to start from; a fresh model when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "run-qa")]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single prompt.
    #[arg(long, conflicts_with = "prompts")]
    pub prompt: Option<String>,
    /// JSONL of {"prompt", "answers"?} objects.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub retrieval_step: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Greedy decoding instead of nucleus sampling.
    #[arg(long)]
    pub greedy: bool,
    /// Generations JSONL.
    #[arg(long, default_value = "generations.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub generations: PathBuf,
    /// Comma-separated subset of repetition, selfbleu, zipf, perplexity, em.
    #[arg(long, value_delimiter = ',', value_parser = clap::builder::PossibleValuesParser::new(config::METRIC_NAMES))]
    pub metrics: Option<Vec<String>>,
    /// Checkpoint for perplexity.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSONL corpus scored for perplexity.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QaEvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "A")]
    pub template: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Metrics JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-question predictions JSONL.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("RETRO_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("RETRO_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = thread_pool().and_then(|pool| pool.install(|| commands::dispatch(cli.command)));
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

pub(crate) fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    match &args.config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::with_seed(args.seed)),
    }
}

pub(crate) fn index_path(db: &Path, index: Option<&PathBuf>) -> PathBuf {
    index.cloned().unwrap_or_else(|| db.join("index.bin"))
}
