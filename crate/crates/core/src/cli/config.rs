//! Run configuration: a flat TOML file merged with command-line flags
//! (flags win), validated before any compute.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, CombineOp, CombinerMode};
use crate::nn::WeightDecay;
use crate::training::TrainConfig;

/// Architecture preset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Full-size networks on 224-pixel figures and 1000-token captions.
    #[default]
    Base,
    /// Small networks on 32-pixel figures and 150-token captions.
    Desk,
}

impl Scale {
    pub fn arch(self) -> ArchConfig {
        match self {
            Scale::Base => ArchConfig::base(),
            Scale::Desk => ArchConfig::desk(),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Scale::Base),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Validation(format!("unknown scale {other:?} (expected base or desk)"))),
        }
    }
}

/// Keys accepted in a configuration file. Every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub manifest: Option<PathBuf>,
    pub embeddings_word: Option<PathBuf>,
    pub embeddings_lemma: Option<PathBuf>,
    pub embeddings_concept: Option<PathBuf>,
    pub mode: Option<String>,
    pub combine: Option<String>,
    pub scale: Option<String>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    #[serde(alias = "lr")]
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub decay: Option<String>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub folds: Option<usize>,
    pub patience: Option<usize>,
    pub early_stopping: Option<bool>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Validation(format!("{}: {}", origin.display(), e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Validation(format!("config file {} does not exist", path.display())));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Fills every key unset here from `base`.
    pub fn or(self, base: FileConfig) -> FileConfig {
        FileConfig {
            manifest: self.manifest.or(base.manifest),
            embeddings_word: self.embeddings_word.or(base.embeddings_word),
            embeddings_lemma: self.embeddings_lemma.or(base.embeddings_lemma),
            embeddings_concept: self.embeddings_concept.or(base.embeddings_concept),
            mode: self.mode.or(base.mode),
            combine: self.combine.or(base.combine),
            scale: self.scale.or(base.scale),
            out: self.out.or(base.out),
            seed: self.seed.or(base.seed),
            checkpoint: self.checkpoint.or(base.checkpoint),
            learning_rate: self.learning_rate.or(base.learning_rate),
            weight_decay: self.weight_decay.or(base.weight_decay),
            decay: self.decay.or(base.decay),
            batch_size: self.batch_size.or(base.batch_size),
            epochs: self.epochs.or(base.epochs),
            folds: self.folds.or(base.folds),
            patience: self.patience.or(base.patience),
            early_stopping: self.early_stopping.or(base.early_stopping),
        }
    }
}

/// Paths of the pretrained embedding tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TablePaths {
    pub word: Option<PathBuf>,
    pub lemma: Option<PathBuf>,
    pub concept: Option<PathBuf>,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub manifest: Option<PathBuf>,
    pub embeddings: TablePaths,
    /// Combiner mode; `None` means "from the checkpoint" (or mode a when a
    /// model is built from scratch).
    pub mode: Option<CombinerMode>,
    pub combine: CombineOp,
    pub scale: Scale,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub config_file: Option<PathBuf>,
}

fn parse_opt<T: FromStr<Err = Error>>(v: Option<String>) -> Result<Option<T>> {
    v.map(|s| s.parse().map_err(|e: Error| Error::Validation(e.to_string()))).transpose()
}

fn existing(path: &Option<PathBuf>, what: &str) -> Result<()> {
    match path {
        Some(p) if !p.exists() => Err(Error::Validation(format!("{what} {} does not exist", p.display()))),
        _ => Ok(()),
    }
}

impl RunConfig {
    /// Merges `flags` over the file named by `config_file` (if any) over
    /// `train_defaults`, then validates the result.
    pub fn resolve(
        command: &str,
        flags: FileConfig,
        config_file: Option<PathBuf>,
        train_defaults: TrainConfig,
    ) -> Result<Self> {
        let file = match &config_file {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let merged = flags.or(file);
        let seed = merged
            .seed
            .ok_or_else(|| Error::Validation("a seed is required (--seed or `seed` in the config file)".into()))?;
        let mut train = train_defaults;
        train.seed = seed;
        if let Some(v) = merged.learning_rate {
            train.learning_rate = v;
        }
        if let Some(v) = merged.weight_decay {
            train.weight_decay = v;
        }
        if let Some(v) = merged.decay.as_deref() {
            train.decay = match v {
                "coupled" => WeightDecay::Coupled,
                "decoupled" => WeightDecay::Decoupled,
                other => return Err(Error::Validation(format!("unknown decay {other:?} (expected coupled or decoupled)"))),
            };
        }
        if let Some(v) = merged.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = merged.epochs {
            train.epochs = v;
        }
        if let Some(v) = merged.folds {
            train.folds = v;
        }
        if let Some(v) = merged.patience {
            train.patience = Some(v);
        }
        if merged.early_stopping == Some(false) {
            train.patience = None;
        }
        train.validate().map_err(|e| Error::Validation(e.to_string()))?;
        let cfg = RunConfig {
            command: command.to_string(),
            manifest: merged.manifest,
            embeddings: TablePaths {
                word: merged.embeddings_word,
                lemma: merged.embeddings_lemma,
                concept: merged.embeddings_concept,
            },
            mode: parse_opt(merged.mode)?,
            combine: parse_opt(merged.combine)?.unwrap_or_default(),
            scale: parse_opt(merged.scale)?.unwrap_or_default(),
            train,
            out: merged.out.unwrap_or_else(|| PathBuf::from("runs").join(command)),
            seed,
            checkpoint: merged.checkpoint,
            config_file,
        };
        existing(&cfg.manifest, "manifest")?;
        existing(&cfg.embeddings.word, "word embedding table")?;
        existing(&cfg.embeddings.lemma, "lemma embedding table")?;
        existing(&cfg.embeddings.concept, "concept embedding table")?;
        existing(&cfg.checkpoint, "checkpoint")?;
        Ok(cfg)
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("{} needs --manifest", self.command)))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("{} needs --checkpoint", self.command)))
    }

    /// Checks that the tables `mode` draws on were given.
    pub fn require_tables(&self, mode: CombinerMode) -> Result<()> {
        let missing: Vec<&str> = mode
            .pretrained_sources()
            .iter()
            .filter_map(|k| {
                let (given, flag) = match k {
                    crate::corpus::TableKind::Word => (&self.embeddings.word, "--embeddings-word"),
                    crate::corpus::TableKind::Lemma => (&self.embeddings.lemma, "--embeddings-lemma"),
                    crate::corpus::TableKind::Concept => (&self.embeddings.concept, "--embeddings-concept"),
                };
                given.is_none().then_some(flag)
            })
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "combiner mode {mode:?} needs {}",
                missing.join(" and ")
            )))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
