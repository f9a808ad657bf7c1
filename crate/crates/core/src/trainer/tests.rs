use super::*;
use crate::corpus::{RawExample, Sentiment};
use crate::fixtures;
use crate::model::{forward_batch, ModelConfig};
use crate::spanprep::{align, encode_examples};

fn short_rows() -> Vec<RawExample> {
    vec![
        RawExample::new("a", "so happy", Some("happy"), Sentiment::Positive),
        RawExample::new("b", "i hate it", Some("hate"), Sentiment::Negative),
        RawExample::new("c", "nice day", Some("nice day"), Sentiment::Neutral),
        RawExample::new("d", "sad again", Some("sad"), Sentiment::Negative),
    ]
}

fn vocab_for(rows: &[RawExample]) -> Vocab {
    let mut corpus: Vec<String> = rows.iter().map(|r| r.text.clone()).collect();
    corpus.push("extract: positive negative neutral context:".into());
    Vocab::build(&corpus, 64).unwrap()
}

fn tiny_config(vocab: &Vocab, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.size(),
        model_dim: 8,
        num_heads: 1,
        num_layers: 1,
        ffn_dim: 16,
        max_source_length: max_len,
        dropout_rate: 0.0,
        seed: 5,
    }
}

fn prepared(rows: &[RawExample], vocab: &Vocab, max_len: usize) -> Vec<TokenizedExample> {
    rows.iter().map(|r| align(vocab, r, max_len).unwrap()).collect()
}

#[test]
fn config_rejects_zero_epochs() {
    let cfg = TrainConfig {
        max_epochs: 0,
        ..TrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
    let cfg = TrainConfig {
        adam_beta1: 1.0,
        ..TrainConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn eval_step_is_pure_and_matches_independent_loss() {
    let rows = short_rows();
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    let mut params = Params::init(&tiny_config(&vocab, 12));
    let before = params.clone();
    let mut trainer = Trainer::new(&vocab, &params, TrainConfig::default()).unwrap();
    let a = trainer.step(&mut params, &batch, Mode::Eval).unwrap();
    let b = trainer.step(&mut params, &batch, Mode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(params, before);

    let logits = forward_batch(&params, &batch).unwrap();
    let starts: Vec<usize> = batch.iter().map(|e| e.start_position).collect();
    let ends: Vec<usize> = batch.iter().map(|e| e.end_position).collect();
    let loss = span_cross_entropy(&logits, &starts, &ends, LossCombination::Mean).unwrap();
    assert!((loss.total_loss - a.total_loss).abs() < 1e-12);
    assert!((loss.loss_start - a.loss_start).abs() < 1e-12);
}

#[test]
fn exact_predictions_give_unit_jaccard() {
    // every example shares the gold span 8..=8 under this rig
    let rows = vec![
        RawExample::new("a", "happy days", Some("happy"), Sentiment::Positive),
        RawExample::new("b", "sad days", Some("sad"), Sentiment::Negative),
    ];
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    assert!(batch.iter().all(|e| (e.start_position, e.end_position) == (8, 8)));
    let params = fixtures::rigged_span_model(&tiny_config(&vocab, 12), 8, 8, 10.0);
    let r = eval_step(&params, &vocab, &batch, LossCombination::Mean).unwrap();
    assert_eq!(r.mean_jaccard, 1.0);
    assert!(r.total_loss < 1e-3);
}

#[test]
fn train_step_changes_params_and_reduces_loss() {
    let rows = short_rows();
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    let mut params = Params::init(&tiny_config(&vocab, 12));
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&vocab, &params, cfg).unwrap();
    let first = trainer.step(&mut params, &batch, Mode::Eval).unwrap();
    for _ in 0..30 {
        trainer.step(&mut params, &batch, Mode::Train).unwrap();
    }
    let last = trainer.step(&mut params, &batch, Mode::Eval).unwrap();
    assert!(last.total_loss < first.total_loss);
}

#[test]
fn training_is_deterministic() {
    let rows = fixtures::overfit_corpus(12, 1);
    let vocab = vocab_for(&rows);
    let data = encode_examples(&vocab, &rows, 48).examples;
    let mut mc = tiny_config(&vocab, 48);
    mc.dropout_rate = 0.1;
    let cfg = TrainConfig {
        max_epochs: 2,
        batch_size: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (p1, l1) = train(Params::init(&mc), &vocab, &data, &data[..4], &cfg).unwrap();
    let (p2, l2) = train(Params::init(&mc), &vocab, &data, &data[..4], &cfg).unwrap();
    assert_eq!(l1, l2);
    let bits = |p: &Params| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&p1), bits(&p2));
    // 12 examples in batches of 5: three train events per epoch plus one validation
    assert_eq!(l1.events.len(), 2 * 4);
    assert_eq!(l1.validation().count(), 2);
}

#[test]
fn train_rejects_empty_set() {
    let rows = short_rows();
    let vocab = vocab_for(&rows);
    let params = Params::init(&tiny_config(&vocab, 12));
    assert!(matches!(
        train(params, &vocab, &[], &[], &TrainConfig::default()),
        Err(TrainError::EmptyDataset)
    ));
}

#[test]
fn gradient_matches_finite_differences() {
    let rows = short_rows();
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    let params = Params::init(&tiny_config(&vocab, 12));
    let report = gradient_check(&params, &batch, 1e-4, GradSample::All).unwrap();
    assert_eq!(report.checked, params.len());
    assert!(report.max_relative_error < 1e-3, "{report:#?}");
}

#[test]
fn gradient_check_multi_head_with_sum_of_layers() {
    let rows = short_rows();
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    let mut cfg = tiny_config(&vocab, 12);
    cfg.num_heads = 2;
    cfg.num_layers = 2;
    let params = Params::init(&cfg);
    let report = gradient_check(&params, &batch, 1e-4, GradSample::PerGroup { per_group: 20, seed: 3 }).unwrap();
    assert!(report.groups.iter().all(|g| g.checked > 0));
    assert!(report.max_relative_error < 1e-3, "{report:#?}");
}

#[test]
fn gradient_check_degenerate_zero_loss() {
    let rows = vec![RawExample::new("a", "happy days", Some("happy"), Sentiment::Positive)];
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    let params = fixtures::rigged_span_model(&tiny_config(&vocab, 12), 8, 8, 40.0);
    let (loss, _) = loss_and_gradient(&params, &batch, LossCombination::Mean).unwrap();
    assert!(loss.total_loss < 1e-9);
    let report = gradient_check(&params, &batch, 1e-4, GradSample::PerGroup { per_group: 8, seed: 0 }).unwrap();
    assert!(report.max_relative_error < 1e-3, "{report:#?}");
}

#[test]
fn central_difference_is_second_order() {
    let rows = short_rows();
    let vocab = vocab_for(&rows);
    let batch = prepared(&rows, &vocab, 12);
    let params = Params::init(&tiny_config(&vocab, 12));
    let idx = params.group(crate::model::GroupKind::HeadWeight, None).offset;
    let numeric = |eps: f64| {
        let mut p = params.clone();
        let orig = p.values()[idx];
        p.values_mut()[idx] = orig + eps;
        let plus = loss_and_gradient(&p, &batch, LossCombination::Mean).unwrap().0.total_loss;
        p.values_mut()[idx] = orig - eps;
        let minus = loss_and_gradient(&p, &batch, LossCombination::Mean).unwrap().0.total_loss;
        (plus - minus) / (2.0 * eps)
    };
    let (g1, g2) = (numeric(1e-4), numeric(2e-4));
    assert!((g1 - g2).abs() < 1e-6, "{g1} vs {g2}");
}
