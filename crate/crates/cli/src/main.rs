//! `topicalign` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "topicalign", version, about = "Neural topic modelling with LLM-guided topic refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a raw corpus, build the vocabulary and write bag-of-words files.
    Preprocess(PreprocessArgs),
    /// Train a topic model, refining topics with LLM suggestions after warm-up.
    Train(TrainArgs),
    /// Compute coherence, clustering and diversity metrics for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Run one suggestion round for a word list and print every intermediate.
    RefineOnce(RefineOnceArgs),
    /// Write the topic report (labels, top words, confidences) for a checkpoint.
    ExportTopics(ExportTopicsArgs),
    /// Merge per-step metrics CSVs into one long-format CSV for plotting.
    EmitCurves(EmitCurvesArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    /// Line-delimited JSON corpus with `text` and optional `label` fields.
    #[arg(long)]
    corpus: PathBuf,
    /// Whitespace-separated word-vector text file.
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = topicalign::corpus::DEFAULT_MIN_DF)]
    min_df: usize,
    #[arg(long, default_value_t = topicalign::corpus::DEFAULT_MAX_DF_RATIO)]
    max_df_ratio: f64,
    /// One stopword per line; the built-in English list is used otherwise.
    #[arg(long)]
    stopwords: Option<PathBuf>,
    /// Fraction of documents held out as the test split.
    #[arg(long, default_value_t = 0.2)]
    test_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LlmKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MockFallback {
    /// Unscripted word sets get an unparseable answer.
    Malformed,
    /// Unscripted word sets get the answer of the most similar scripted set.
    Nearest,
}

#[derive(Debug, Args)]
struct LlmArgs {
    #[arg(long, value_enum)]
    llm: LlmKind,
    /// Scripted completions for `--llm mock` (line-delimited JSON).
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MockFallback::Malformed)]
    mock_default: MockFallback,
    /// Chat-completions base URL for `--llm http` (else `LLM_BASE_URL`).
    #[arg(long)]
    llm_url: Option<String>,
    /// Model name for `--llm http` (else `LLM_MODEL`).
    #[arg(long)]
    llm_model: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Directory written by `preprocess`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    llm: LlmArgs,
    /// Persistent suggestion cache (line-delimited JSON, appended to).
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory written by `preprocess`; its test split is evaluated.
    #[arg(long)]
    data: PathBuf,
    /// Reference corpus for coherence, same format as the raw corpus.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sliding window size for co-occurrence counts.
    #[arg(long, default_value_t = topicalign::eval::CV_WINDOW)]
    window: usize,
    /// Stopwords used to tokenize the reference corpus.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RefineOnceArgs {
    /// Comma-separated topic words.
    #[arg(long)]
    words: String,
    #[command(flatten)]
    llm: LlmArgs,
    /// Vocabulary file used for out-of-vocabulary filtering.
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value = topicalign::llm::prompt::DEFAULT_TEMPLATE)]
    template: String,
    #[arg(long, default_value_t = topicalign::llm::prompt::DEFAULT_LABEL_WORDS)]
    label_words: usize,
    #[arg(long, default_value_t = topicalign::llm::prompt::DEFAULT_REFINED_WORDS)]
    refined_words: usize,
}

#[derive(Debug, Args)]
struct ExportTopicsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Refinement records written by `train`; supplies labels and confidences.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmitCurvesArgs {
    /// Per-step metrics CSVs written by `train`.
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Run identifiers, one per metrics file (default: the file path).
    #[arg(long, num_args = 1..)]
    run_id: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Error categories mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::RefineOnce(a) => commands::refine_once(a),
        Command::ExportTopics(a) => commands::export_topics(a),
        Command::EmitCurves(a) => commands::emit_curves(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
