//! Command-line runner for divex experiments.
//!
//! The binary is a thin wrapper over [`execute`], which tests and the
//! fixture generator call in-process with their own [`Backend`].

pub mod backend;
mod commands;
pub mod rundir;
pub mod score;
pub mod settings;

use std::fmt;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use divex_core::clustering::{ClusterMethod, CountingMode, DEFAULT_TAU};
use divex_core::prompting::PromptMode;
use divex_core::TaskType;

pub use backend::Backend;
pub use commands::{comparison, execute, load_report};

/// Invalid flags, config or inputs. Maps to exit status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Exit status for an error returned by [`execute`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err
        .chain()
        .any(|e| e.downcast_ref::<UsageError>().is_some())
    {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "divex",
    version,
    about = "Diversity-aware opinion prompting and scoring"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Serve requests from the response cache only; never touch the network.
    #[arg(long, global = true)]
    pub offline: bool,

    /// Replay recorded exchanges from a fixture file or directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub fixtures: Option<PathBuf>,

    #[arg(long, global = true)]
    pub run_id: Option<String>,

    /// Statements processed in parallel.
    #[arg(long, global = true, value_name = "K")]
    pub concurrency: Option<usize>,

    /// JSON file with default settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Parent directory of run directories.
    #[arg(long, global = true, value_name = "DIR")]
    pub runs_dir: Option<PathBuf>,

    /// Shared response cache (JSON lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub cache: Option<PathBuf>,

    /// Directory of template overrides.
    #[arg(long, global = true, value_name = "DIR")]
    pub templates: Option<PathBuf>,

    #[arg(long, global = true)]
    pub model: Option<String>,

    #[arg(long, global = true, value_name = "URL")]
    pub base_url: Option<String>,

    #[arg(long, global = true)]
    pub temperature: Option<f64>,

    #[arg(long, global = true)]
    pub top_p: Option<f64>,

    #[arg(long, global = true)]
    pub max_tokens: Option<u32>,

    #[arg(long, global = true)]
    pub timeout_ms: Option<u64>,

    #[arg(long, global = true)]
    pub max_retries: Option<u32>,

    #[arg(long, global = true)]
    pub embedding_model: Option<String>,

    #[arg(long, global = true, value_name = "URL")]
    pub embedding_base_url: Option<String>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate opinions for every statement with one prompt each.
    Gen(GenArgs),
    /// Step-by-step recall: one seed opinion, then N opinions per step.
    Recall(RecallArgs),
    /// Attach extracted criteria to opinions that have none.
    ExtractCriteria(RunArg),
    /// Group each statement's criteria into clusters.
    Cluster(ClusterArgs),
    /// Compute diversity metrics and write the report.
    Score(ScoreArgs),
    /// Compare the reports of several runs over one corpus.
    Report(ReportArgs),
    /// Inspect the response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Statements as .csv or .jsonl.
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,

    #[arg(long, default_value = "stance")]
    pub task: TaskType,

    /// Column or key holding the statement text.
    #[arg(long, default_value = "text")]
    pub text_field: String,

    #[arg(long, default_value = "id")]
    pub id_field: String,

    #[arg(long)]
    pub dataset_tag: Option<String>,

    /// Use a seeded random sample of this many statements.
    #[arg(long, value_name = "N")]
    pub sample: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// `criteria` or `freeform`.
    #[arg(long, default_value = "criteria")]
    pub mode: PromptMode,

    #[arg(long, default_value_t = 1)]
    pub shots: usize,

    /// Demonstrations as JSON lines; the built-in bank by default.
    #[arg(long, value_name = "FILE")]
    pub shot_bank: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RecallArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// Comma-separated opinion targets per step.
    #[arg(long, default_value = "2,5,8,11,14,17,20")]
    pub schedule: String,
}

#[derive(Debug, Clone, Args)]
pub struct RunArg {
    /// Run directory.
    pub run: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ClusterArgs {
    pub run: PathBuf,

    /// `llm` or `greedy`.
    #[arg(long, default_value = "llm")]
    pub cluster_method: ClusterMethod,

    /// Cosine threshold for greedy clustering.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    pub run: PathBuf,

    /// semantic, perspective, lexical, balance or all; repeatable.
    #[arg(long = "metric", value_delimiter = ',')]
    pub metrics: Vec<String>,

    /// How phrases outside every group count: `drop` or `singleton`.
    #[arg(long, default_value = "drop")]
    pub counting_mode: CountingMode,

    #[arg(long, default_value = "llm")]
    pub cluster_method: ClusterMethod,

    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,

    /// Also report semantic diversity within each stance.
    #[arg(long)]
    pub per_stance: bool,

    /// n-gram sizes for lexical diversity.
    #[arg(long = "ngram", value_delimiter = ',', default_value = "1,2,3")]
    pub ngrams: Vec<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories or report.json files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,

    /// Write comparison.md and curves.csv here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum CacheCommand {
    /// Entry counts and file size.
    Stats,
}

/// Parses `2,5,8` into a schedule.
pub fn parse_schedule(s: &str) -> Result<Vec<usize>, UsageError> {
    let schedule = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| UsageError(format!("schedule entry {:?} is not a number", p.trim())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    divex_core::orchestrator::validate_schedule(&schedule)
        .map_err(|e| UsageError(e.to_string()))?;
    Ok(schedule)
}

/// Parses `args` (program name first) and runs the command. Returns the exit
/// status; clap usage errors give 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli, None) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
