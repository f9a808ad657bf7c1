use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{loss_and_gradient, LossCombination, TrainError};
use crate::model::{self, Params, SpanLogits};
use crate::spanprep::TokenizedExample;

/// Which parameters to probe.
#[derive(Debug, Clone, Copy)]
pub enum GradSample {
    All,
    /// Up to `per_group` random entries from every parameter group.
    PerGroup { per_group: usize, seed: u64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    pub groups: Vec<GroupCheck>,
}

fn total_loss(params: &Params, batch: &[TokenizedExample], combination: LossCombination) -> Result<f64, TrainError> {
    let logits: Vec<SpanLogits> = batch
        .iter()
        .map(|ex| model::forward(params, &ex.source_ids, &ex.source_mask))
        .collect::<Result<_, _>>()?;
    let starts: Vec<usize> = batch.iter().map(|e| e.start_position).collect();
    let ends: Vec<usize> = batch.iter().map(|e| e.end_position).collect();
    Ok(super::span_cross_entropy(&logits, &starts, &ends, combination)?.total_loss)
}

/// Compares the backpropagated gradient of the total span loss with central
/// differences `(L(p + eps) - L(p - eps)) / 2 eps`, dropout off. The error
/// per entry is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn gradient_check(
    params: &Params,
    batch: &[TokenizedExample],
    epsilon: f64,
    which: GradSample,
) -> Result<GradCheckReport, TrainError> {
    let combination = LossCombination::Mean;
    let (_, analytic) = loss_and_gradient(params, batch, combination)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        groups: Vec::new(),
    };
    for (gi, group) in params.groups().iter().enumerate() {
        let indices: Vec<usize> = match which {
            GradSample::All => group.range().collect(),
            GradSample::PerGroup { per_group, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(gi as u64));
                let k = per_group.min(group.len());
                let mut picked: Vec<usize> = sample(&mut rng, group.len(), k)
                    .into_iter()
                    .map(|i| group.offset + i)
                    .collect();
                picked.sort_unstable();
                picked
            }
        };
        let mut worst: f64 = 0.0;
        for &i in &indices {
            let original = probe.values()[i];
            probe.values_mut()[i] = original + epsilon;
            let plus = total_loss(&probe, batch, combination)?;
            probe.values_mut()[i] = original - epsilon;
            let minus = total_loss(&probe, batch, combination)?;
            probe.values_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.values()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.checked += indices.len();
        report.max_relative_error = report.max_relative_error.max(worst);
        report.groups.push(GroupCheck {
            name: group.name.clone(),
            checked: indices.len(),
            max_relative_error: worst,
        });
    }
    Ok(report)
}
