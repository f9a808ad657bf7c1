use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{SpanLogits, MASKED_LOGIT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no examples")]
    Empty,
    #[error("{logits} logit rows but {starts} starts and {ends} ends")]
    LengthMismatch { logits: usize, starts: usize, ends: usize },
    #[error("example {example}: position {position} outside sequence of length {len}")]
    PositionOutOfRange { example: usize, position: usize, len: usize },
    #[error("example {example}: gold position {position} is masked")]
    PositionMasked { example: usize, position: usize },
}

/// How the start and end losses combine into the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossCombination {
    /// `(start + end) / 2`
    #[default]
    Mean,
    /// `start + end`
    Sum,
}

impl LossCombination {
    pub fn combine(self, start: f64, end: f64) -> f64 {
        match self {
            LossCombination::Mean => (start + end) / 2.0,
            LossCombination::Sum => start + end,
        }
    }

    /// d total / d side.
    pub(crate) fn side_weight(self) -> f64 {
        match self {
            LossCombination::Mean => 0.5,
            LossCombination::Sum => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanLoss {
    pub loss_start: f64,
    pub loss_end: f64,
    pub total_loss: f64,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]` and, optionally, its gradient
/// `softmax - onehot(target)` written into `grad`.
pub(crate) fn nll(logits: &[f64], target: usize, grad: Option<&mut [f64]>) -> f64 {
    let lse = log_sum_exp(logits);
    if let Some(g) = grad {
        for (gk, &x) in g.iter_mut().zip(logits) {
            *gk = (x - lse).exp();
        }
        g[target] -= 1.0;
    }
    lse - logits[target]
}

fn is_masked(logit: f64) -> bool {
    logit <= MASKED_LOGIT
}

pub(crate) fn check_targets(logits: &[SpanLogits], starts: &[usize], ends: &[usize]) -> Result<(), LossError> {
    if logits.len() != starts.len() || logits.len() != ends.len() {
        return Err(LossError::LengthMismatch {
            logits: logits.len(),
            starts: starts.len(),
            ends: ends.len(),
        });
    }
    if logits.is_empty() {
        return Err(LossError::Empty);
    }
    for (example, (l, (&s, &e))) in logits.iter().zip(starts.iter().zip(ends)).enumerate() {
        for (position, side) in [(s, &l.start_logits), (e, &l.end_logits)] {
            if position >= side.len() {
                return Err(LossError::PositionOutOfRange {
                    example,
                    position,
                    len: side.len(),
                });
            }
            if is_masked(side[position]) {
                return Err(LossError::PositionMasked { example, position });
            }
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the gold start and end positions under
/// per-position softmax distributions over the full sequence.
pub fn span_cross_entropy(
    logits: &[SpanLogits],
    starts: &[usize],
    ends: &[usize],
    combination: LossCombination,
) -> Result<SpanLoss, LossError> {
    check_targets(logits, starts, ends)?;
    let n = logits.len() as f64;
    let loss_start = logits
        .iter()
        .zip(starts)
        .map(|(l, &s)| nll(&l.start_logits, s, None))
        .sum::<f64>()
        / n;
    let loss_end = logits
        .iter()
        .zip(ends)
        .map(|(l, &e)| nll(&l.end_logits, e, None))
        .sum::<f64>()
        / n;
    Ok(SpanLoss {
        loss_start,
        loss_end,
        total_loss: combination.combine(loss_start, loss_end),
    })
}
