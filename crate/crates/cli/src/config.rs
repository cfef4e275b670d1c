//! Run configuration for `multitag train`.
//!
//! Relative paths are resolved against the directory holding the config
//! file, so a config and its corpora can be moved together.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use multitag::data::{ConllColumns, LongSentencePolicy};
use multitag::encoder::EncoderConfig;
use multitag::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Invalid configuration or a missing input; exits with status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task_id: String,
    #[serde(default)]
    pub dataset_name: String,
    #[serde(default = "one")]
    pub lambda: f64,
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Label file (one per line); inferred from the corpus when absent.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

/// Encoder sizes; the vocabulary size comes from the vocab file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Defaults to twice the hidden size.
    pub feedforward_size: Option<usize>,
    pub max_position: usize,
    pub num_segments: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            num_layers: 2,
            num_heads: 2,
            feedforward_size: None,
            max_position: 128,
            num_segments: 2,
            dropout_rate: 0.0,
        }
    }
}

impl EncoderSection {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            feedforward_size: self.feedforward_size.unwrap_or(2 * self.hidden_size),
            max_position: self.max_position,
            num_segments: self.num_segments,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ColumnSection {
    pub token: usize,
    /// Defaults to the last column.
    pub label: Option<usize>,
}

impl From<ColumnSection> for ConllColumns {
    fn from(c: ColumnSection) -> Self {
        ConllColumns {
            token: c.token,
            label: c.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required unless `init_checkpoint` supplies one.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    /// Start from this checkpoint's encoder (e.g. one written by `import`);
    /// heads are always initialized afresh from `tasks`.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_max_len")]
    pub max_seq_len: usize,
    #[serde(default)]
    pub long_sentences: LongSentencePolicy,
    #[serde(default)]
    pub columns: ColumnSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub tasks: Vec<TaskConfig>,
}

fn default_max_len() -> usize {
    multitag::data::DEFAULT_MAX_LEN
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("invalid run config: {e}")))
    }

    /// Parses, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.resolve(path.parent().unwrap_or(Path::new("")));
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        if let Some(p) = &mut self.vocab {
            join(p);
        }
        if let Some(p) = &mut self.init_checkpoint {
            join(p);
        }
        join(&mut self.output_dir);
        for t in &mut self.tasks {
            join(&mut t.train);
            for p in [&mut t.dev, &mut t.test, &mut t.labels]
                .into_iter()
                .flatten()
            {
                join(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.tasks.is_empty() {
            return Err(ConfigError("config lists no tasks".into()));
        }
        if self.vocab.is_none() && self.init_checkpoint.is_none() {
            return Err(ConfigError(
                "config needs `vocab` or `init_checkpoint`".into(),
            ));
        }
        self.train
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        let mut inputs: Vec<(&str, &Path)> = Vec::new();
        if let Some(p) = &self.vocab {
            inputs.push(("vocab", p));
        }
        if let Some(p) = &self.init_checkpoint {
            inputs.push(("init_checkpoint", p));
        }
        for t in &self.tasks {
            inputs.push(("train corpus", &t.train));
            for (what, p) in [
                ("dev corpus", &t.dev),
                ("test corpus", &t.test),
                ("label file", &t.labels),
            ] {
                if let Some(p) = p {
                    inputs.push((what, p));
                }
            }
        }
        for (what, p) in inputs {
            if !p.is_file() {
                return Err(ConfigError(format!("{what} not found: {}", p.display())));
            }
        }
        Ok(())
    }
}
