//! `vpr`: command-line pipeline for asymmetric place-recognition
//! embeddings. Generates synthetic worlds, builds per-place memory banks,
//! trains the lightweight query model against a frozen gallery space,
//! embeds raw features, evaluates retrieval recall, runs the numerical
//! validation suites, and benchmarks bank construction.
//!
//! Exit codes: 0 on success, 1 when a validation suite fails, 2 on bad
//! input (unreadable or malformed files, bad flags, bad configuration).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use commands::EvalArgs;

#[derive(Debug, Error)]
pub enum CliError {
    /// Unreadable, malformed, or inconsistent input. Exit code 2.
    #[error("{0}")]
    Input(String),
    /// A validation suite ran and failed. Exit code 1.
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Validation(_) => 1,
        }
    }
}

/// Wraps any displayable error as bad input.
pub(crate) fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GtMode {
    /// Relevant gallery items lie within `--threshold` meters.
    Geo,
    /// Relevant gallery items lie within `--frame-window` frame indices.
    Frames,
    /// Relevant pairs are listed explicitly in the `--pairs` file.
    Pairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// Sampled estimates stay at or below the closed-form bound.
    Bound,
    /// Analytic gradients match central finite differences.
    Grad,
    /// Quadratic forms match an explicit basis expansion.
    Eig,
    /// Sampled-loss deviation shrinks as the sample count grows.
    Conv,
    /// Zero augmentation collapses the regularized loss to the plain one.
    Equality,
    /// Positive augmentation strictly increases the loss.
    Gap,
    /// Every suite above.
    All,
}

#[derive(Parser)]
#[command(name = "vpr", version, about = "Asymmetric place-recognition embedding pipeline")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Force single-worker execution so reductions are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world into a directory of fixed-name artifacts.
    Synth {
        /// JSON run configuration; `{}` uses defaults.
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the per-place memory bank from gallery embeddings.
    BuildBank {
        /// Gallery embedding store.
        #[arg(long)]
        embeddings: PathBuf,
        /// Gallery manifest (JSON lines).
        #[arg(long)]
        manifest: PathBuf,
        /// Output bank file.
        #[arg(long)]
        out: PathBuf,
        /// L2-normalize embeddings before accumulating statistics.
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        normalize: bool,
    },
    /// Train the query model against a frozen gallery and its bank.
    Train {
        /// JSON run configuration; `{}` uses defaults.
        #[arg(long)]
        config: PathBuf,
        /// Gallery embedding store.
        #[arg(long)]
        embeddings: PathBuf,
        /// Gallery raw-feature store (query-model inputs).
        #[arg(long)]
        raw: PathBuf,
        /// Gallery manifest (JSON lines).
        #[arg(long)]
        manifest: PathBuf,
        /// Memory bank file.
        #[arg(long)]
        bank: PathBuf,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// Output training log CSV (epoch,step,lr,mean_loss).
        #[arg(long)]
        log: PathBuf,
    },
    /// Embed a raw-feature store with a trained query model.
    Embed {
        /// Trained query model file.
        #[arg(long)]
        model: PathBuf,
        /// Raw-feature store to embed.
        #[arg(long)]
        raw: PathBuf,
        /// Output embedding store.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate retrieval recall of query embeddings against a gallery.
    Eval {
        /// Query embedding store.
        #[arg(long)]
        query_embeddings: PathBuf,
        /// Gallery embedding store.
        #[arg(long)]
        gallery_embeddings: PathBuf,
        /// Query manifest (JSON lines).
        #[arg(long)]
        query_manifest: PathBuf,
        /// Gallery manifest (JSON lines).
        #[arg(long)]
        gallery_manifest: PathBuf,
        /// How ground-truth matches are defined.
        #[arg(long, value_enum, default_value_t = GtMode::Geo)]
        gt_mode: GtMode,
        /// Geographic match radius in meters (geo mode).
        #[arg(long, default_value_t = 25.0)]
        threshold: f64,
        /// Frame-index match window (frames mode).
        #[arg(long, default_value_t = 0)]
        frame_window: u64,
        /// JSON-lines file of {query_id, gallery_id} pairs (pairs mode).
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Recall depths, strictly ascending.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        ks: Vec<usize>,
        /// Output report JSON.
        #[arg(long)]
        report_json: PathBuf,
        /// Output report CSV (k,recall).
        #[arg(long)]
        report_csv: PathBuf,
    },
    /// Run numerical validation suites; exit 1 if any fails.
    Validate {
        /// Which suite to run.
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Seed for the randomized suite instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time bank construction against brute-force k-NN precompute.
    Bench {
        /// Gallery sizes to benchmark.
        #[arg(long, value_delimiter = ',', default_values_t = [2000usize, 8000, 20000])]
        sizes: Vec<usize>,
        /// Embedding dimension.
        #[arg(long, default_value_t = 128)]
        dim: usize,
        /// Neighbors retained by the k-NN baseline.
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Seed for the random galleries.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV (n,bank_seconds,knn_seconds,ratio).
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sizes the global worker pool. `--deterministic` forces one worker;
/// otherwise `--workers` applies when given, and the default pool is used
/// when neither flag is present.
fn configure_workers(workers: Option<usize>, deterministic: bool) -> Result<(), CliError> {
    let threads = if deterministic { Some(1) } else { workers };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Input("--workers must be at least 1".to_string()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| input(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers(cli.workers, cli.deterministic)?;
    match cli.command {
        Command::Synth { config, out_dir } => commands::cmd_synth(&config, &out_dir),
        Command::BuildBank { embeddings, manifest, out, normalize } => {
            commands::cmd_build_bank(&embeddings, &manifest, &out, normalize)
        }
        Command::Train { config, embeddings, raw, manifest, bank, out, log } => {
            commands::cmd_train(&config, &embeddings, &raw, &manifest, &bank, &out, &log)
        }
        Command::Embed { model, raw, out } => commands::cmd_embed(&model, &raw, &out),
        Command::Eval {
            query_embeddings,
            gallery_embeddings,
            query_manifest,
            gallery_manifest,
            gt_mode,
            threshold,
            frame_window,
            pairs,
            ks,
            report_json,
            report_csv,
        } => commands::cmd_eval(&EvalArgs {
            query_embeddings: &query_embeddings,
            gallery_embeddings: &gallery_embeddings,
            query_manifest: &query_manifest,
            gallery_manifest: &gallery_manifest,
            gt_mode,
            threshold,
            frame_window,
            pairs: pairs.as_deref(),
            ks: &ks,
            report_json: &report_json,
            report_csv: &report_csv,
        }),
        Command::Validate { suite, seed } => commands::cmd_validate(suite, seed),
        Command::Bench { sizes, dim, k, seed, out } => {
            commands::cmd_bench(&sizes, dim, k, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
