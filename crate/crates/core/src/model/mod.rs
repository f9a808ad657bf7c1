//! Compact transformer encoder with a per-token start/end span head.
//!
//! `embeddings (token + learned position) → N × [masked multi-head
//! self-attention → residual → layer norm → GELU feed-forward → residual →
//! layer norm] → linear head (model_dim → 2)`. The head's two columns are
//! the start and end logits of every source position; masked positions are
//! reported as [`MASKED_LOGIT`].

mod encoder;
mod params;

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spanprep::TokenizedExample;

pub use params::{layout, GroupKind, Gradients, ParamGroup, Params};

pub(crate) use encoder::{backward, forward_trace, Dropout, Trace};

/// Logit reported at masked positions.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub max_source_length: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The default toy configuration for a given vocabulary and source length.
    pub fn toy(vocab_size: usize, max_source_length: usize) -> Self {
        ModelConfig {
            vocab_size,
            model_dim: 64,
            num_heads: 4,
            num_layers: 2,
            ffn_dim: 128,
            max_source_length,
            dropout_rate: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if [
            self.model_dim,
            self.num_heads,
            self.num_layers,
            self.ffn_dim,
            self.max_source_length,
        ]
        .contains(&0)
        {
            return bad("all dimensions must be at least 1".into());
        }
        if self.vocab_size < 6 {
            return bad(format!("vocab_size {} < 6", self.vocab_size));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        layout(self).iter().map(ParamGroup::len).sum()
    }

    /// Checks that `other` (e.g. a checkpoint's config) has the same shapes.
    pub fn ensure_same_shape(&self, other: &ModelConfig) -> Result<(), ModelError> {
        let dims = |c: &ModelConfig| {
            [
                c.vocab_size,
                c.model_dim,
                c.num_heads,
                c.num_layers,
                c.ffn_dim,
                c.max_source_length,
            ]
        };
        if dims(self) != dims(other) {
            return Err(ModelError::ShapeMismatch(format!(
                "expected (vocab, dim, heads, layers, ffn, max_len) = {:?}, found {:?}",
                dims(self),
                dims(other)
            )));
        }
        Ok(())
    }
}

/// Start and end scores for every source position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanLogits {
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

impl SpanLogits {
    pub fn len(&self) -> usize {
        self.start_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_logits.is_empty()
    }

    /// Scatters compact `(n, 2)` logits back to full length; everything
    /// outside `positions` gets [`MASKED_LOGIT`].
    pub(crate) fn scatter(len: usize, positions: &[usize], compact: &Array2<f64>) -> Self {
        let mut out = SpanLogits {
            start_logits: vec![MASKED_LOGIT; len],
            end_logits: vec![MASKED_LOGIT; len],
        };
        for (row, &k) in compact.outer_iter().zip(positions) {
            out.start_logits[k] = row[0];
            out.end_logits[k] = row[1];
        }
        out
    }
}

pub(crate) fn check_input(
    config: &ModelConfig,
    source_ids: &[u32],
    source_mask: &[u8],
) -> Result<(), ModelError> {
    let len = config.max_source_length;
    if source_ids.len() != len || source_mask.len() != len {
        return Err(ModelError::ShapeMismatch(format!(
            "expected {len} ids and mask entries, got {} and {}",
            source_ids.len(),
            source_mask.len()
        )));
    }
    if let Some(&id) = source_ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::ShapeMismatch(format!(
            "token id {id} >= vocab_size {}",
            config.vocab_size
        )));
    }
    if source_mask.iter().any(|&m| m > 1) {
        return Err(ModelError::ShapeMismatch("mask entries must be 0 or 1".into()));
    }
    Ok(())
}

/// Inference-mode forward pass (dropout off).
pub fn forward(params: &Params, source_ids: &[u32], source_mask: &[u8]) -> Result<SpanLogits, ModelError> {
    check_input(params.config(), source_ids, source_mask)?;
    let (compact, trace) = forward_trace(params, source_ids, source_mask, None);
    Ok(SpanLogits::scatter(source_ids.len(), &trace.positions, &compact))
}

/// `forward` over every example, evaluated in parallel; output order
/// follows the batch.
pub fn forward_batch(params: &Params, batch: &[TokenizedExample]) -> Result<Vec<SpanLogits>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    }
    batch
        .par_iter()
        .map(|ex| forward(params, &ex.source_ids, &ex.source_mask))
        .collect()
}

/// Training-mode forward pass with a dropout stream seeded by `seed`.
pub(crate) fn forward_train(
    params: &Params,
    source_ids: &[u32],
    source_mask: &[u8],
    seed: Option<u64>,
) -> Result<(SpanLogits, Trace), ModelError> {
    check_input(params.config(), source_ids, source_mask)?;
    let rate = params.config().dropout_rate;
    let mut dropout = seed.filter(|_| rate > 0.0).map(|s| Dropout {
        rate,
        rng: ChaCha8Rng::seed_from_u64(s),
    });
    let (compact, trace) = forward_trace(params, source_ids, source_mask, dropout.as_mut());
    let logits = SpanLogits::scatter(source_ids.len(), &trace.positions, &compact);
    Ok((logits, trace))
}

/// Accumulates the gradient for full-length logit gradients into `grads`.
pub(crate) fn backward_full(
    params: &Params,
    trace: &Trace,
    d_start: &[f64],
    d_end: &[f64],
    grads: &mut Gradients,
) {
    let n = trace.positions.len();
    let mut d_logits = Array2::zeros((n, 2));
    for (i, &k) in trace.positions.iter().enumerate() {
        d_logits[[i, 0]] = d_start[k];
        d_logits[[i, 1]] = d_end[k];
    }
    backward(params, trace, &d_logits, grads);
}

const CHECKPOINT_FORMAT: &str = "sentispan-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    groups: Vec<ParamGroup>,
    values: Vec<f64>,
}

impl Params {
    /// JSON container: `{format, version, config, groups, values}` with
    /// `values` the flat parameter buffer in [`layout`] order.
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config().clone(),
            groups: self.groups().to_vec(),
            values: self.values().to_vec(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self, ModelError> {
        let file: CheckpointFile =
            serde_json::from_str(json).map_err(|e| ModelError::InvalidCheckpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(ModelError::InvalidCheckpoint(format!(
                "unsupported format {} v{}",
                file.format, file.version
            )));
        }
        file.config.validate()?;
        if file.groups != layout(&file.config) {
            return Err(ModelError::InvalidCheckpoint(
                "group table disagrees with config".into(),
            ));
        }
        let params = Params::from_parts(file.config, file.values)
            .ok_or_else(|| ModelError::InvalidCheckpoint("value count disagrees with config".into()))?;
        if !params.all_finite() {
            return Err(ModelError::InvalidCheckpoint("non-finite parameter".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_json()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let json = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_checkpoint_json(&json)
    }

    /// Loads a checkpoint and rejects it unless its shapes match `expected`.
    pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self, ModelError> {
        let params = Self::load(path)?;
        expected.ensure_same_shape(params.config())?;
        Ok(params)
    }
}
