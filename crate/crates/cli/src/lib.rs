//! The `fusemerge` command line: fusion training, merging, inspection and
//! cross-tokenizer alignment of checkpoints.
//!
//! Machine-readable JSON goes to stdout, diagnostics to stderr. Exit codes:
//! 0 success, 1 usage, 2 incompatible checkpoints, 3 I/O or format errors,
//! 4 non-finite training loss.

mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};
use fusemerge::fusion::MinceGranularity;
use fusemerge::merge::{Method, WeightMode};
use fusemerge::{DType, Granularity};

pub use config::CliConfig;
pub use error::CliError;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "FUSEMERGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "fusemerge", version, about = "Distribution fusion and checkpoint merging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge fine-tuned checkpoints.
    Merge(MergeArgs),
    /// VaRM merge at every granularity, one output file each.
    Sweep(SweepArgs),
    /// Fine-tune a pivot toward fused teacher distributions.
    FuseTrain(FuseTrainArgs),
    /// List tensors, optionally with per-unit deltas against a base.
    Inspect(InspectArgs),
    /// Project a source distribution file onto pivot tokens and vocabulary.
    Align(AlignArgs),
    /// Create a random toy model whose vocabulary covers a corpus.
    InitPivot(InitPivotArgs),
    /// Write a model's per-sample distributions over a corpus.
    ExportDists(ExportDistsArgs),
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Fine-tuned checkpoint; repeat for each target.
    #[arg(long = "targets")]
    pub targets: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub weight_mode: Option<WeightMode>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Comma-separated linear coefficients.
    #[arg(long, value_delimiter = ',')]
    pub coeffs: Option<Vec<f64>>,
    /// SLERP interpolation factor.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub drop_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layer_pattern: Option<String>,
    /// Regex; only matching tensors are merged.
    #[arg(long)]
    pub include: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long = "targets")]
    pub targets: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub weight_mode: Option<WeightMode>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub layer_pattern: Option<String>,
    #[arg(long)]
    pub include: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseTrainArgs {
    #[arg(long)]
    pub pivot: Option<PathBuf>,
    /// Directory of `sample_NNNNN.st` teacher distribution files.
    #[arg(long)]
    pub teacher_dir: Option<PathBuf>,
    /// JSON-lines dialogue corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log path; defaults to the output path with `.log.json`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub block_len: Option<usize>,
    #[arg(long)]
    pub mince: Option<MinceGranularity>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub delta_against: Option<PathBuf>,
    #[arg(long, default_value = "matrix")]
    pub granularity: Granularity,
    #[arg(long, default_value = fusemerge::partition::DEFAULT_LAYER_PATTERN)]
    pub layer_pattern: String,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub source_dist: PathBuf,
    /// JSON list of source token strings; defaults to the file's `tokens`.
    #[arg(long)]
    pub source_tokens: Option<PathBuf>,
    /// JSON list of pivot token strings.
    #[arg(long)]
    pub pivot_tokens: PathBuf,
    /// JSON list of the pivot vocabulary, indexed by id.
    #[arg(long)]
    pub pivot_vocab: PathBuf,
    /// JSON list of the source vocabulary; defaults to the file's `vocab`.
    #[arg(long)]
    pub source_vocab: Option<PathBuf>,
    /// JSON list of pivot gold ids, used for rows with nothing to project.
    #[arg(long)]
    pub pivot_gold: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct InitPivotArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Initial weights are uniform in [-scale, scale].
    #[arg(long, default_value_t = 0.1)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "F64")]
    pub dtype: DType,
}

#[derive(Debug, Args)]
pub struct ExportDistsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub block_len: usize,
}

pub(crate) fn subcommand_usage(name: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match cmd.find_subcommand_mut(name) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| commands::execute(cli.command));
    match result {
        Ok(report) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage { usage: Some(u), .. } = &e {
                eprintln!("\n{u}");
            }
            e.exit_code()
        }
    }
}
