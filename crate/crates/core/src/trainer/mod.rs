//! Span loss, optimizer steps and the epoch loop.
//!
//! A step runs the batch forward, scores each example's start and end
//! logits with softmax cross-entropy, decodes the greedy span for a batch
//! Jaccard, and in training mode backpropagates and applies one Adam
//! update. Examples in a batch are processed in parallel; their gradients
//! are reduced in fixed chunks of [`REDUCTION_CHUNK`] so the sum is the
//! same on any thread count.

mod adam;
mod gradcheck;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{self, EvalError, EvalReport};
use crate::model::{self, Gradients, ModelError, Params, SpanLogits};
use crate::spanprep::TokenizedExample;
use crate::tokenizer::Vocab;

pub use adam::Adam;
pub use gradcheck::{gradient_check, GradCheckReport, GradSample};
pub use loss::{span_cross_entropy, LossCombination, LossError, SpanLoss};

const REDUCTION_CHUNK: usize = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Callback(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub loss_combination: LossCombination,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 16,
            max_epochs: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            grad_clip_norm: Some(1.0),
            seed: 0,
            loss_combination: LossCombination::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(b > 0.0 && b < 1.0) {
                return bad("adam betas must lie in (0, 1)");
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        if let Some(c) = self.grad_clip_norm {
            if c.is_nan() || c <= 0.0 {
                return bad("grad_clip_norm must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub loss_start: f64,
    pub loss_end: f64,
    pub total_loss: f64,
    pub mean_jaccard: f64,
}

/// Logits and per-side negative log-likelihoods of one example.
struct ExampleOutcome {
    logits: SpanLogits,
    nll_start: f64,
    nll_end: f64,
}

type BatchOutcome = (Vec<ExampleOutcome>, Option<Gradients>);

/// Forward (and, with `grads`, backward) for every example in `batch`.
/// `dropout_seeds` switches on training-mode dropout.
fn run_batch(
    params: &Params,
    batch: &[TokenizedExample],
    combination: LossCombination,
    dropout_seeds: Option<&[u64]>,
    want_grads: bool,
) -> Result<BatchOutcome, TrainError> {
    let n = batch.len() as f64;
    let side_weight = combination.side_weight() / n;
    let chunks: Vec<Result<BatchOutcome, TrainError>> = batch
        .par_chunks(REDUCTION_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grads = want_grads.then(|| Gradients::zeros_like(params));
            let mut outcomes = Vec::with_capacity(chunk.len());
            for (k, ex) in chunk.iter().enumerate() {
                let seed = dropout_seeds.map(|s| s[c * REDUCTION_CHUNK + k]);
                let (logits, trace) = model::forward_train(params, &ex.source_ids, &ex.source_mask, seed)?;
                let targets = [ex.start_position];
                loss::check_targets(std::slice::from_ref(&logits), &targets, &[ex.end_position])?;
                let len = logits.len();
                let mut d_start = vec![0.0; len];
                let mut d_end = vec![0.0; len];
                let nll_start = loss::nll(&logits.start_logits, ex.start_position, Some(&mut d_start));
                let nll_end = loss::nll(&logits.end_logits, ex.end_position, Some(&mut d_end));
                if let Some(g) = grads.as_mut() {
                    d_start.iter_mut().chain(d_end.iter_mut()).for_each(|v| *v *= side_weight);
                    model::backward_full(params, &trace, &d_start, &d_end, g);
                }
                outcomes.push(ExampleOutcome {
                    logits,
                    nll_start,
                    nll_end,
                });
            }
            Ok((outcomes, grads))
        })
        .collect();

    let mut all = Vec::with_capacity(batch.len());
    let mut total: Option<Gradients> = None;
    for chunk in chunks {
        let (outcomes, grads) = chunk?;
        all.extend(outcomes);
        if let Some(g) = grads {
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.accumulate(&g),
            }
        }
    }
    Ok((all, total))
}

fn summarize(
    vocab: &Vocab,
    batch: &[TokenizedExample],
    outcomes: &[ExampleOutcome],
    combination: LossCombination,
) -> Result<StepResult, TrainError> {
    let n = outcomes.len() as f64;
    let loss_start = outcomes.iter().map(|o| o.nll_start).sum::<f64>() / n;
    let loss_end = outcomes.iter().map(|o| o.nll_end).sum::<f64>() / n;
    let logits: Vec<SpanLogits> = outcomes.iter().map(|o| o.logits.clone()).collect();
    let scores = evaluator::score_batch(vocab, batch, &logits)?;
    Ok(StepResult {
        loss_start,
        loss_end,
        total_loss: combination.combine(loss_start, loss_end),
        mean_jaccard: evaluator::mean(scores.iter().map(|s| s.jaccard)),
    })
}

/// Loss and gradient of the combined span loss over `batch`, dropout off.
pub fn loss_and_gradient(
    params: &Params,
    batch: &[TokenizedExample],
    combination: LossCombination,
) -> Result<(SpanLoss, Gradients), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (outcomes, grads) = run_batch(params, batch, combination, None, true)?;
    let n = outcomes.len() as f64;
    let loss_start = outcomes.iter().map(|o| o.nll_start).sum::<f64>() / n;
    let loss_end = outcomes.iter().map(|o| o.nll_end).sum::<f64>() / n;
    Ok((
        SpanLoss {
            loss_start,
            loss_end,
            total_loss: combination.combine(loss_start, loss_end),
        },
        grads.expect("gradients requested"),
    ))
}

/// Holds the optimizer state across steps.
pub struct Trainer<'v> {
    vocab: &'v Vocab,
    config: TrainConfig,
    optimizer: Adam,
}

impl<'v> Trainer<'v> {
    pub fn new(vocab: &'v Vocab, params: &Params, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let optimizer = Adam::new(
            params.len(),
            config.learning_rate,
            (config.adam_beta1, config.adam_beta2),
            config.adam_epsilon,
            config.grad_clip_norm,
        );
        Ok(Trainer {
            vocab,
            config,
            optimizer,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Per-example dropout seeds for the next update.
    fn dropout_seeds(&self, n: usize) -> Vec<u64> {
        let step = self.optimizer.steps();
        (0..n as u64)
            .map(|k| {
                self.config
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(step.wrapping_mul(0xBF58_476D_1CE4_E5B9))
                    .wrapping_add(k.wrapping_mul(0x94D0_49BB_1331_11EB))
            })
            .collect()
    }

    /// One batch. In [`Mode::Eval`] nothing is mutated.
    pub fn step(&mut self, params: &mut Params, batch: &[TokenizedExample], mode: Mode) -> Result<StepResult, TrainError> {
        match mode {
            Mode::Eval => eval_step(params, self.vocab, batch, self.config.loss_combination),
            Mode::Train => {
                if batch.is_empty() {
                    return Err(TrainError::EmptyDataset);
                }
                let seeds = self.dropout_seeds(batch.len());
                let combination = self.config.loss_combination;
                let (outcomes, grads) = run_batch(params, batch, combination, Some(&seeds), true)?;
                let result = summarize(self.vocab, batch, &outcomes, combination)?;
                self.optimizer
                    .update(params, &grads.expect("gradients requested"));
                Ok(result)
            }
        }
    }
}

/// Inference-mode loss and Jaccard for one batch.
pub fn eval_step(
    params: &Params,
    vocab: &Vocab,
    batch: &[TokenizedExample],
    combination: LossCombination,
) -> Result<StepResult, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (outcomes, _) = run_batch(params, batch, combination, None, false)?;
    summarize(vocab, batch, &outcomes, combination)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Validation,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    pub epoch: usize,
    pub batch: Option<usize>,
    pub loss_start: f64,
    pub loss_end: f64,
    pub total_loss: f64,
    pub mean_jaccard: f64,
    pub split: LogSplit,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub events: Vec<TrainEvent>,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn validation(&self) -> impl Iterator<Item = &TrainEvent> {
        self.events.iter().filter(|e| e.split == LogSplit::Validation)
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Summary handed to the per-epoch callback.
#[derive(Debug, Clone)]
pub struct EpochSummary {
    pub epoch: usize,
    pub validation: Option<EvalReport>,
    pub is_best: bool,
}

pub fn train(
    params: Params,
    vocab: &Vocab,
    train_set: &[TokenizedExample],
    val_set: &[TokenizedExample],
    config: &TrainConfig,
) -> Result<(Params, TrainLog), TrainError> {
    train_with_callback(params, vocab, train_set, val_set, config, |_, _| Ok(()))
}

/// Epoch loop: seeded shuffle per epoch, training steps over every batch
/// (the last partial batch included), then an inference pass over
/// `val_set`. Returns the parameters of the epoch with the best validation
/// mean Jaccard (earliest on ties), or of the last epoch when `val_set` is
/// empty.
pub fn train_with_callback(
    mut params: Params,
    vocab: &Vocab,
    train_set: &[TokenizedExample],
    val_set: &[TokenizedExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary, &Params) -> Result<(), TrainError>,
) -> Result<(Params, TrainLog), TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut trainer = Trainer::new(vocab, &params, config.clone())?;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Params)> = None;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D),
        ));
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TokenizedExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let r = trainer.step(&mut params, &batch, Mode::Train)?;
            log.events.push(TrainEvent {
                epoch,
                batch: Some(b),
                loss_start: r.loss_start,
                loss_end: r.loss_end,
                total_loss: r.total_loss,
                mean_jaccard: r.mean_jaccard,
                split: LogSplit::Train,
            });
        }

        let validation = if val_set.is_empty() {
            None
        } else {
            Some(evaluator::evaluate(&params, vocab, val_set, config.batch_size)?)
        };
        let is_best = match (&validation, &best) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some(r), Some((score, _))) => r.mean_jaccard > *score,
        };
        if let Some(r) = &validation {
            log.events.push(TrainEvent {
                epoch,
                batch: None,
                loss_start: r.loss_start,
                loss_end: r.loss_end,
                total_loss: r.total_loss(config.loss_combination),
                mean_jaccard: r.mean_jaccard,
                split: LogSplit::Validation,
            });
        }
        if is_best {
            let score = validation.as_ref().map_or(f64::NEG_INFINITY, |r| r.mean_jaccard);
            best = Some((score, params.clone()));
            log.best_epoch = epoch;
        }
        on_epoch(
            &EpochSummary {
                epoch,
                validation,
                is_best,
            },
            &params,
        )?;
    }
    let (_, best_params) = best.expect("at least one epoch ran");
    Ok((best_params, log))
}

#[cfg(test)]
mod tests;
