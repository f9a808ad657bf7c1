use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::model::ModelConfig;
use crate::spanprep::DEFAULT_MAX_SOURCE_LENGTH;
use crate::trainer::{LossCombination, TrainConfig};

/// Everything a command needs, loaded from TOML and `--set key=value`
/// overrides. The single `seed` drives model init, dropout, shuffling and
/// splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub max_source_length: usize,
    pub vocab_max_size: usize,
    pub eval_batch_size: usize,
    /// When set, `prepare` splits the train CSV into train/validation/test
    /// with these ratios instead of reading separate files.
    pub split_ratios: Option<[f64; 3]>,
    pub paths: Paths,
    pub model: ModelSection,
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Defaults to `{output_dir}/vocab.txt`.
    pub vocab: Option<PathBuf>,
    /// Defaults to `{output_dir}/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Global-norm clip threshold; `0` disables clipping.
    pub grad_clip_norm: f64,
    pub loss_combination: LossCombination,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            max_source_length: DEFAULT_MAX_SOURCE_LENGTH,
            vocab_max_size: 20_000,
            eval_batch_size: 32,
            split_ratios: None,
            paths: Paths::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            train: None,
            validation: None,
            test: None,
            vocab: None,
            checkpoint_dir: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let toy = ModelConfig::toy(0, 0);
        ModelSection {
            model_dim: toy.model_dim,
            num_heads: toy.num_heads,
            num_layers: toy.num_layers,
            ffn_dim: toy.ffn_dim,
            dropout_rate: toy.dropout_rate,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            grad_clip_norm: t.grad_clip_norm.unwrap_or(0.0),
            loss_combination: t.loss_combination,
        }
    }
}

impl RunConfig {
    /// Reads `file` (if any), applies `key=value` overrides in order, and
    /// deserializes the result.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut root = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::usage("ConfigNotFound", format!("{}: {e}", path.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::usage("InvalidConfig", e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for spec in overrides {
            apply_override(&mut root, spec)?;
        }
        let cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::usage("InvalidConfig", e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            model_dim: self.model.model_dim,
            num_heads: self.model.num_heads,
            num_layers: self.model.num_layers,
            ffn_dim: self.model.ffn_dim,
            max_source_length: self.max_source_length,
            dropout_rate: self.model.dropout_rate,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_epsilon: t.adam_epsilon,
            grad_clip_norm: (t.grad_clip_norm > 0.0).then_some(t.grad_clip_norm),
            seed: self.seed,
            loss_combination: t.loss_combination,
        }
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.paths
            .vocab
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("vocab.txt"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.paths.output_dir.join("checkpoints"))
    }

    pub fn prepared_path(&self, split: &str) -> PathBuf {
        self.paths.output_dir.join("prepared").join(format!("{split}.jsonl"))
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("best.json")
    }
}

/// `a.b.c=value`: the value is parsed as a TOML value, falling back to a
/// plain string (so paths need no quoting).
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::usage("InvalidOverride", format!("expected key=value, got {spec:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage("InvalidOverride", format!("bad key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::usage("InvalidOverride", format!("{part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
