//! Greedy span decoding, word-set Jaccard, and evaluation reports.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RawExample;
use crate::model::{self, ModelError, Params, SpanLogits};
use crate::spanprep::{encode_source, TokenizedExample};
use crate::tokenizer::{TokenizerError, Vocab};
use crate::trainer::{span_cross_entropy, LossCombination, LossError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("every position is masked")]
    AllMasked,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("example {0} has no recognised sentiment")]
    MissingSentiment(String),
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// `|A ∩ B| / |A ∪ B|` over lowercased whitespace-delimited words; two
/// empty texts score 1.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let words = |s: &str| -> HashSet<String> { s.split_whitespace().map(str::to_lowercase).collect() };
    let (a, b) = (words(a), words(b));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub score: f64,
    pub text: String,
}

/// Highest `start_logits[i] + end_logits[j]` over unmasked `i <= j`
/// (optionally `j - i <= max_span_length`). Ties go to the smallest `i`,
/// then the smallest `j`. `text` is left empty.
pub fn decode_span(
    logits: &SpanLogits,
    mask: &[u8],
    max_span_length: Option<usize>,
) -> Result<SpanPrediction, EvalError> {
    let len = logits.len().min(mask.len());
    let mut best: Option<(usize, usize, f64)> = None;
    // best_start: argmax of start_logits over the admissible window ending at j
    let mut best_start: Option<usize> = None;
    for j in 0..len {
        if mask[j] != 1 {
            continue;
        }
        let lo = max_span_length.map_or(0, |m| j.saturating_sub(m));
        match max_span_length {
            None => {
                if best_start.is_none_or(|i| logits.start_logits[j] > logits.start_logits[i]) {
                    best_start = Some(j);
                }
            }
            Some(_) => {
                best_start = (lo..=j)
                    .filter(|&i| mask[i] == 1)
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(a) if logits.start_logits[i] <= logits.start_logits[a] => Some(a),
                        _ => Some(i),
                    });
            }
        }
        let i = best_start.expect("j itself is admissible");
        let score = logits.start_logits[i] + logits.end_logits[j];
        let better = match best {
            None => true,
            Some((bi, _, bs)) => score > bs || (score == bs && i < bi),
        };
        if better {
            best = Some((i, j, score));
        }
    }
    let (start, end, score) = best.ok_or(EvalError::AllMasked)?;
    Ok(SpanPrediction {
        start,
        end,
        score,
        text: String::new(),
    })
}

/// Decodes `source_ids[start..=end]` with special tokens skipped.
pub fn span_text(vocab: &Vocab, source_ids: &[u32], start: usize, end: usize) -> Result<String, EvalError> {
    Ok(vocab.decode(&source_ids[start..=end], true)?)
}

/// Model input for [`extract_answer`].
#[derive(Debug, Clone, Copy)]
pub enum AnswerInput<'a> {
    Prepared(&'a TokenizedExample),
    Raw(&'a RawExample),
}

/// Forward pass, greedy span decoding, then decoding of the chosen source
/// tokens. Raw examples are formatted and encoded first; no gold span is
/// needed.
pub fn extract_answer(params: &Params, vocab: &Vocab, input: AnswerInput<'_>) -> Result<SpanPrediction, EvalError> {
    let (ids, mask) = match input {
        AnswerInput::Prepared(ex) => (ex.source_ids.clone(), ex.source_mask.clone()),
        AnswerInput::Raw(ex) => {
            let sentiment = ex
                .sentiment
                .ok_or_else(|| EvalError::MissingSentiment(ex.id.clone()))?;
            let (ids, mask, _) = encode_source(vocab, sentiment, &ex.text, params.config().max_source_length);
            (ids, mask)
        }
    };
    let logits = model::forward(params, &ids, &mask)?;
    let mut pred = decode_span(&logits, &mask, None)?;
    pred.text = span_text(vocab, &ids, pred.start, pred.end)?;
    Ok(pred)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub predicted_text: String,
    pub target_text: String,
    pub jaccard: f64,
    /// Jaccard against the raw selected text, when it was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss_start: f64,
    pub loss_end: f64,
    pub mean_jaccard: f64,
    pub n_examples: usize,
    pub per_example: Vec<ExampleScore>,
}

impl EvalReport {
    /// Fills `raw_jaccard` for examples whose id appears in `selected`.
    pub fn attach_raw_jaccard(&mut self, selected: &HashMap<String, String>) {
        for score in &mut self.per_example {
            score.raw_jaccard = selected
                .get(&score.id)
                .map(|raw| jaccard(&score.predicted_text, raw));
        }
    }

    pub fn mean_raw_jaccard(&self) -> Option<f64> {
        let vals: Vec<f64> = self.per_example.iter().filter_map(|s| s.raw_jaccard).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn total_loss(&self, combination: LossCombination) -> f64 {
        combination.combine(self.loss_start, self.loss_end)
    }
}

pub(crate) fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

/// Scores one batch: per-example predicted text, decoded target text and
/// their Jaccard.
pub(crate) fn score_batch(
    vocab: &Vocab,
    batch: &[TokenizedExample],
    logits: &[SpanLogits],
) -> Result<Vec<ExampleScore>, EvalError> {
    batch
        .iter()
        .zip(logits)
        .map(|(ex, lg)| {
            let span = decode_span(lg, &ex.source_mask, None)?;
            let predicted_text = span_text(vocab, &ex.source_ids, span.start, span.end)?;
            let target_text = vocab.decode(&ex.target_ids, true)?;
            Ok(ExampleScore {
                id: ex.id.clone(),
                jaccard: jaccard(&predicted_text, &target_text),
                predicted_text,
                target_text,
                raw_jaccard: None,
            })
        })
        .collect()
}

/// Inference-mode pass over `dataset` in batches of `batch_size`. Losses
/// are batch means weighted by batch size.
pub fn evaluate(
    params: &Params,
    vocab: &Vocab,
    dataset: &[TokenizedExample],
    batch_size: usize,
) -> Result<EvalReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(EvalError::BadBatchSize);
    }
    let mut loss_start = 0.0;
    let mut loss_end = 0.0;
    let mut per_example = Vec::with_capacity(dataset.len());
    for batch in dataset.chunks(batch_size) {
        let logits = model::forward_batch(params, batch)?;
        let starts: Vec<usize> = batch.iter().map(|e| e.start_position).collect();
        let ends: Vec<usize> = batch.iter().map(|e| e.end_position).collect();
        let loss = span_cross_entropy(&logits, &starts, &ends, LossCombination::Mean)?;
        let w = batch.len() as f64;
        loss_start += loss.loss_start * w;
        loss_end += loss.loss_end * w;
        per_example.extend(score_batch(vocab, batch, &logits)?);
    }
    let n = dataset.len();
    Ok(EvalReport {
        loss_start: loss_start / n as f64,
        loss_end: loss_end / n as f64,
        mean_jaccard: mean(per_example.iter().map(|s| s.jaccard)),
        n_examples: n,
        per_example,
    })
}

/// Plain-text table with one row per split and the columns
/// `loss_end  loss_start  Jaccard`.
pub fn render_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>10}  {:>8}", "", "loss_end", "loss_start", "Jaccard");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.3}  {:>10.3}  {:>8.2}",
            name, r.loss_end, r.loss_start, r.mean_jaccard
        );
    }
    out
}
