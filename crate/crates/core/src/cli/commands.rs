use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{CliError, RunConfig};
use crate::corpus::{parse_csv, split_dataset, validate_example, Finding, LoadedCsv, RawExample, Sentiment};
use crate::evaluator::{self, extract_answer, jaccard, render_table, AnswerInput, EvalReport, SpanPrediction};
use crate::model::Params;
use crate::spanprep::{self, encode_examples, AlignError, AlignFailure, AlignFlag, TokenizedExample};
use crate::tokenizer::Vocab;
use crate::trainer::{self, EpochSummary, LogSplit, TrainError, TrainLog};

const SPLITS: [&str; 3] = ["train", "validation", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub reason: AlignFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub split: String,
    pub rows: usize,
    pub excluded_rows: usize,
    pub prepared: usize,
    pub alignment_failed: usize,
    pub crossed_span: usize,
    pub truncated: usize,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentAudit {
    pub vocab_size: usize,
    pub splits: Vec<SplitAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub split: String,
    pub report: EvalReport,
    /// Mean Jaccard against the raw annotated text, when the CSV is available.
    pub mean_raw_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub splits: Vec<SplitEval>,
}

impl EvalOutput {
    pub fn table(&self) -> String {
        let rows: Vec<(&str, &EvalReport)> =
            self.splits.iter().map(|s| (s.split.as_str(), &s.report)).collect();
        render_table(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditLine {
    pub split: String,
    pub id: String,
    pub start_position: usize,
    pub end_position: usize,
    pub decoded_span: String,
    /// The annotated selected text, or the decoded target when the raw
    /// CSV is not configured.
    pub reference: String,
    pub round_trip_jaccard: f64,
    pub flags: Vec<AlignFlag>,
}

#[derive(Serialize)]
struct FindingRecord<'a> {
    split: &'a str,
    id: &'a str,
    finding: Finding,
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::data(
            "MissingInput",
            format!("{what} {} does not exist", path.display()),
        ))
    }
}

fn configured_csvs(cfg: &RunConfig) -> Vec<(&'static str, &PathBuf)> {
    let p = &cfg.paths;
    SPLITS
        .iter()
        .zip([&p.train, &p.validation, &p.test])
        .filter_map(|(name, path)| path.as_ref().map(|path| (*name, path)))
        .collect()
}

fn check_csvs_exist(cfg: &RunConfig) -> Result<(), CliError> {
    for (name, path) in configured_csvs(cfg) {
        require_file(path, &format!("{name} csv"))?;
    }
    Ok(())
}

/// A zero-byte or blank file counts as an empty dataset rather than a
/// missing header.
fn load_rows(path: &Path) -> Result<LoadedCsv, CliError> {
    let raw = fs::read_to_string(path)
        .map_err(|e| CliError::data("Io", format!("{}: {e}", path.display())))?;
    if raw.trim().is_empty() {
        warn!("{} is empty", path.display());
        return Ok(LoadedCsv::default());
    }
    let loaded = parse_csv(&raw)?;
    if loaded.excluded > 0 {
        warn!("{}: excluded {} rows with empty text", path.display(), loaded.excluded);
    }
    if loaded.examples.is_empty() {
        warn!("{} has no data rows", path.display());
    }
    Ok(loaded)
}

fn write_config(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.paths.output_dir)?;
    fs::write(
        cfg.paths.output_dir.join(format!("{command}.config.toml")),
        cfg.to_toml(),
    )?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::internal("Serialize", e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab, CliError> {
    let path = cfg.vocab_path();
    require_file(&path, "vocab file")?;
    Ok(Vocab::load(path)?)
}

fn load_params(cfg: &RunConfig, vocab: &Vocab, checkpoint: Option<&Path>) -> Result<(Params, PathBuf), CliError> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.best_checkpoint());
    require_file(&path, "checkpoint")?;
    let params = Params::load_matching(&path, &cfg.model_config(vocab.size()))?;
    Ok((params, path))
}

fn read_prepared(cfg: &RunConfig, vocab: &Vocab, split: &str) -> Result<Option<Vec<TokenizedExample>>, CliError> {
    let path = cfg.prepared_path(split);
    if !path.is_file() {
        return Ok(None);
    }
    let file = File::open(&path)?;
    let examples = spanprep::read_jsonl(BufReader::new(file), vocab).map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })?;
    Ok(Some(examples))
}

/// Annotated selected text by id, across every configured CSV.
fn raw_selected(cfg: &RunConfig) -> Result<HashMap<String, String>, CliError> {
    let mut map = HashMap::new();
    for (_, path) in configured_csvs(cfg) {
        for ex in load_rows(path)?.examples {
            if let Some(sel) = ex.selected_text {
                map.entry(ex.id).or_insert(sel);
            }
        }
    }
    Ok(map)
}

/// Builds the vocabulary from the training prompts, aligns every split and
/// writes `prepared/{split}.jsonl`, the vocab file and
/// `alignment_audit.json`.
pub fn cmd_prepare(cfg: &RunConfig, findings: bool, out: &mut dyn Write) -> Result<AlignmentAudit, CliError> {
    let train_path = cfg
        .paths
        .train
        .as_ref()
        .ok_or_else(|| CliError::usage("MissingInput", "paths.train is required"))?;
    check_csvs_exist(cfg)?;
    write_config(cfg, "prepare")?;

    let train_rows = load_rows(train_path)?;
    let mut splits: Vec<(&str, LoadedCsv)> = Vec::new();
    if let Some(ratios) = cfg.split_ratios {
        let split = split_dataset(&train_rows.examples, ratios, cfg.seed)?;
        let with = |examples| LoadedCsv { examples, excluded: 0 };
        splits.push(("train", LoadedCsv { examples: split.train, excluded: train_rows.excluded }));
        splits.push(("validation", with(split.validation)));
        splits.push(("test", with(split.test)));
    } else {
        splits.push(("train", train_rows));
        for (name, path) in [("validation", &cfg.paths.validation), ("test", &cfg.paths.test)] {
            if let Some(path) = path {
                splits.push((name, load_rows(path)?));
            }
        }
    }

    // The prompt scaffold is always present so that an unseen sentiment
    // never encodes to <unk>.
    let mut corpus: Vec<String> = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral]
        .iter()
        .map(|&s| spanprep::format_source(s, ""))
        .collect();
    corpus.extend(splits[0].1.examples.iter().map(|ex| match ex.sentiment {
        Some(s) => spanprep::format_source(s, &ex.text),
        None => ex.text.clone(),
    }));
    let vocab = Vocab::build(&corpus, cfg.vocab_max_size)?;
    let vocab_path = cfg.vocab_path();
    if let Some(dir) = vocab_path.parent() {
        fs::create_dir_all(dir)?;
    }
    vocab.save(&vocab_path)?;

    let prepared_dir = cfg.paths.output_dir.join("prepared");
    fs::create_dir_all(&prepared_dir)?;
    let mut findings_out = if findings {
        Some(BufWriter::new(File::create(cfg.paths.output_dir.join("findings.jsonl"))?))
    } else {
        None
    };

    let mut audit = AlignmentAudit {
        vocab_size: vocab.size(),
        splits: Vec::new(),
    };
    for (name, loaded) in &splits {
        if let Some(w) = findings_out.as_mut() {
            for ex in &loaded.examples {
                for finding in validate_example(ex) {
                    let rec = FindingRecord { split: name, id: &ex.id, finding };
                    serde_json::to_writer(&mut *w, &rec).map_err(|e| CliError::internal("Serialize", e.to_string()))?;
                    w.write_all(b"\n")?;
                }
            }
        }
        let prepared = encode_examples(&vocab, &loaded.examples, cfg.max_source_length);
        let file = File::create(cfg.prepared_path(name))?;
        spanprep::write_jsonl(BufWriter::new(file), &prepared.examples)?;
        let failures: Vec<FailureRecord> = prepared
            .failures
            .iter()
            .map(|AlignError::AlignmentFailed { id, reason }| FailureRecord {
                id: id.clone(),
                reason: *reason,
            })
            .collect();
        if !failures.is_empty() {
            warn!("{name}: {} examples failed to align", failures.len());
        }
        let s = SplitAudit {
            split: name.to_string(),
            rows: loaded.examples.len(),
            excluded_rows: loaded.excluded,
            prepared: prepared.examples.len(),
            alignment_failed: failures.len(),
            crossed_span: prepared.crossed_count(),
            truncated: prepared.truncated_count(),
            failures,
        };
        writeln!(
            out,
            "{}: {} rows, {} prepared, {} alignment failures, {} crossed spans, {} truncated",
            s.split, s.rows, s.prepared, s.alignment_failed, s.crossed_span, s.truncated
        )?;
        audit.splits.push(s);
    }
    if let Some(mut w) = findings_out {
        w.flush()?;
    }
    write_json(&cfg.paths.output_dir.join("alignment_audit.json"), &audit)?;
    info!("vocab of {} tokens written to {}", vocab.size(), vocab_path.display());
    Ok(audit)
}

/// Trains from `prepared/train.jsonl` (validated on
/// `prepared/validation.jsonl` when present), saving every epoch's
/// parameters plus `best.json` and `train_log.jsonl`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainLog, CliError> {
    let vocab = load_vocab(cfg)?;
    let train_path = cfg.prepared_path("train");
    require_file(&train_path, "prepared train file")?;
    let train_set = read_prepared(cfg, &vocab, "train")?.unwrap_or_default();
    let val_set = read_prepared(cfg, &vocab, "validation")?.unwrap_or_default();
    let model_config = cfg.model_config(vocab.size());
    model_config.validate()?;
    let train_config = cfg.train_config();
    train_config.validate()?;
    write_config(cfg, "train")?;

    let ckpt_dir = cfg.checkpoint_dir();
    fs::create_dir_all(&ckpt_dir)?;
    let params = Params::init(&model_config);
    info!(
        "training {} parameters on {} examples ({} validation)",
        params.len(),
        train_set.len(),
        val_set.len()
    );
    let (best, log) = trainer::train_with_callback(
        params,
        &vocab,
        &train_set,
        &val_set,
        &train_config,
        |summary: &EpochSummary, p: &Params| {
            p.save(ckpt_dir.join(format!("epoch-{:03}.json", summary.epoch)))
                .map_err(|e| TrainError::Callback(e.to_string()))?;
            if let Some(r) = &summary.validation {
                info!("epoch {}: validation Jaccard {:.4}", summary.epoch, r.mean_jaccard);
            }
            Ok(())
        },
    )?;
    best.save(cfg.best_checkpoint())?;
    let log_file = File::create(cfg.paths.output_dir.join("train_log.jsonl"))?;
    log.write_jsonl(BufWriter::new(log_file))?;

    for epoch in 1..=train_config.max_epochs {
        let batches: Vec<f64> = log
            .events
            .iter()
            .filter(|e| e.epoch == epoch && e.split == LogSplit::Train)
            .map(|e| e.total_loss)
            .collect();
        let train_loss = batches.iter().sum::<f64>() / batches.len().max(1) as f64;
        write!(out, "epoch {epoch}: train loss {train_loss:.4}")?;
        if let Some(v) = log.validation().find(|e| e.epoch == epoch) {
            write!(out, ", validation loss {:.4}, Jaccard {:.4}", v.total_loss, v.mean_jaccard)?;
        }
        writeln!(out)?;
    }
    writeln!(out, "best epoch {}", log.best_epoch)?;
    Ok(log)
}

/// Scores a checkpoint on every non-empty prepared split and writes
/// `eval_report.json` and `eval_table.txt`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: &mut dyn Write) -> Result<EvalOutput, CliError> {
    check_csvs_exist(cfg)?;
    let vocab = load_vocab(cfg)?;
    let (params, ckpt_path) = load_params(cfg, &vocab, checkpoint)?;
    let raw = raw_selected(cfg)?;
    write_config(cfg, "eval")?;

    let mut result = EvalOutput {
        checkpoint: ckpt_path.display().to_string(),
        splits: Vec::new(),
    };
    for split in SPLITS {
        let Some(data) = read_prepared(cfg, &vocab, split)? else {
            continue;
        };
        if data.is_empty() {
            warn!("prepared {split} split is empty; skipped");
            continue;
        }
        let mut report = evaluator::evaluate(&params, &vocab, &data, cfg.eval_batch_size)?;
        report.attach_raw_jaccard(&raw);
        result.splits.push(SplitEval {
            split: split.to_string(),
            mean_raw_jaccard: report.mean_raw_jaccard(),
            report,
        });
    }
    if result.splits.is_empty() {
        return Err(CliError::data("EmptyDataset", "no prepared examples to evaluate"));
    }
    write_json(&cfg.paths.output_dir.join("eval_report.json"), &result)?;
    let table = result.table();
    fs::write(cfg.paths.output_dir.join("eval_table.txt"), &table)?;
    write!(out, "{table}")?;
    Ok(result)
}

pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    text: &str,
    sentiment: &str,
    out: &mut dyn Write,
) -> Result<SpanPrediction, CliError> {
    if text.trim().is_empty() {
        return Err(CliError::usage("EmptyText", "text must not be empty"));
    }
    let sentiment: Sentiment = sentiment
        .parse()
        .map_err(|_| CliError::usage("UnknownSentiment", format!("unknown sentiment {sentiment:?}")))?;
    let vocab = load_vocab(cfg)?;
    let (params, _) = load_params(cfg, &vocab, checkpoint)?;
    let ex = RawExample::new("predict", text, None, sentiment);
    let pred = extract_answer(&params, &vocab, AnswerInput::Raw(&ex))?;
    writeln!(out, "{}", pred.text)?;
    Ok(pred)
}

/// Decodes each prepared gold span and scores it against the annotation,
/// one JSON line per example in `alignment_inspect.jsonl`.
pub fn cmd_inspect_alignment(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<AuditLine>, CliError> {
    check_csvs_exist(cfg)?;
    let vocab = load_vocab(cfg)?;
    require_file(&cfg.prepared_path("train"), "prepared train file")?;
    let raw = raw_selected(cfg)?;
    write_config(cfg, "inspect-alignment")?;

    let mut lines = Vec::new();
    for split in SPLITS {
        let Some(data) = read_prepared(cfg, &vocab, split)? else {
            continue;
        };
        let before = lines.len();
        for ex in &data {
            let decoded_span = ex.gold_text(&vocab)?;
            let reference = match raw.get(&ex.id) {
                Some(sel) => sel.clone(),
                None => vocab.decode(&ex.target_ids, true)?,
            };
            lines.push(AuditLine {
                split: split.to_string(),
                id: ex.id.clone(),
                start_position: ex.start_position,
                end_position: ex.end_position,
                round_trip_jaccard: jaccard(&decoded_span, &reference),
                decoded_span,
                reference,
                flags: ex.flags.clone(),
            });
        }
        let scored = &lines[before..];
        let good = scored.iter().filter(|l| l.round_trip_jaccard >= 0.8).count();
        let mean = evaluator::mean(scored.iter().map(|l| l.round_trip_jaccard));
        writeln!(
            out,
            "{split}: {} examples, mean round-trip Jaccard {mean:.4}, {good} at or above 0.8",
            scored.len()
        )?;
    }
    let mut w = BufWriter::new(File::create(cfg.paths.output_dir.join("alignment_inspect.jsonl"))?);
    for line in &lines {
        serde_json::to_writer(&mut w, line).map_err(|e| CliError::internal("Serialize", e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(lines)
}
