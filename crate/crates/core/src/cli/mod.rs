//! Command-line entry point: parses arguments, resolves the run
//! configuration and dispatches to the pipelines.
//!
//! Exit codes: 0 on success, 1 on invalid input (arguments, configuration,
//! manifests, missing files), 2 when a pipeline fails at run time.

mod commands;
mod config;

#[cfg(test)]
mod tests;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::eval::{Scorer, TrunkMode};
use crate::model::Branch;

pub use config::{FileConfig, RunConfig, Scale, TablePaths};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fcc", version, about = "Figure-caption correspondence: training, evaluation and inspection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand. Each may also be set in the
/// `--config` file; flags take precedence.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON-lines corpus manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_word: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_lemma: Option<PathBuf>,
    #[arg(long)]
    pub embeddings_concept: Option<PathBuf>,
    /// Embedding combiner mode: a (learnt words), b (+ pretrained words),
    /// c (+ lemmas and concepts).
    #[arg(long)]
    pub mode: Option<String>,
    /// How combiner sources are merged: concat or add.
    #[arg(long)]
    pub combine: Option<String>,
    /// Network size: base or desk.
    #[arg(long)]
    pub scale: Option<String>,
    /// Flat TOML file with any of these options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Train every epoch, without early stopping.
    #[arg(long)]
    pub no_early_stopping: bool,
}

impl Common {
    fn flags(&self) -> FileConfig {
        FileConfig {
            manifest: self.manifest.clone(),
            embeddings_word: self.embeddings_word.clone(),
            embeddings_lemma: self.embeddings_lemma.clone(),
            embeddings_concept: self.embeddings_concept.clone(),
            mode: self.mode.clone(),
            combine: self.combine.clone(),
            scale: self.scale.clone(),
            out: self.out.clone(),
            seed: self.seed,
            checkpoint: self.checkpoint.clone(),
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            decay: None,
            batch_size: self.batch_size,
            epochs: self.epochs,
            folds: self.folds,
            patience: self.patience,
            early_stopping: self.no_early_stopping.then_some(false),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-validated correspondence training.
    Train(Common),
    /// Correspondence accuracy of a checkpoint on held-out records.
    EvalFcc(Common),
    /// Bidirectional figure/caption retrieval.
    Retrieve {
        #[command(flatten)]
        common: Common,
        /// correspondence or dot-product.
        #[arg(long, default_value = "correspondence")]
        scorer: String,
        /// Comma-separated recall cut-offs.
        #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
        ks: Vec<usize>,
    },
    /// Category classification on top of a trunk.
    Classify {
        #[command(flatten)]
        common: Common,
        /// vision or language.
        #[arg(long, default_value = "vision")]
        branch: String,
        /// fcc (the --checkpoint trunk), random, or external (precomputed
        /// visual features).
        #[arg(long, default_value = "fcc")]
        source: String,
        /// frozen or trainable.
        #[arg(long, default_value = "frozen")]
        trunk: String,
    },
    /// Feature ranking, top samples, heatmaps and specificity.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "vision")]
        branch: String,
        /// Samples kept per feature.
        #[arg(long, default_value_t = crate::inspect::DEFAULT_TOP_K)]
        top_k: usize,
        /// Number of leading features rendered as heatmaps.
        #[arg(long, default_value_t = 3)]
        render: usize,
    },
    /// Writes branch features of every record as an embedding table.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "vision")]
        branch: String,
    },
    /// Finite-difference check of every primitive and layer.
    Gradcheck(Common),
    /// Generates the synthetic shapes corpus with matching embedding tables.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        records: usize,
        #[arg(long, default_value_t = 4)]
        shapes: usize,
        #[arg(long, default_value_t = 5)]
        colors: usize,
        #[arg(long, default_value_t = 32)]
        image_size: u32,
    },
}

pub(crate) fn parse_branch(s: &str) -> Result<Branch, Error> {
    match s {
        "vision" => Ok(Branch::Vision),
        "language" | "text" => Ok(Branch::Language),
        other => Err(Error::Validation(format!("unknown branch {other:?} (expected vision or language)"))),
    }
}

pub(crate) fn parse_scorer(s: &str) -> Result<Scorer, Error> {
    s.parse()
}

pub(crate) fn parse_trunk(s: &str) -> Result<TrunkMode, Error> {
    s.parse()
}

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Parse { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// Runs the command line `args` (program name first) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
