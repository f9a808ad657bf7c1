use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sentispan::cli::RunConfig;
use sentispan::corpus::{write_csv, RawExample};
use sentispan::fixtures;
use sentispan::tokenizer::{normalize, Vocab};
use sentispan::{jaccard, Params};
use tempfile::TempDir;

const SMALL_MODEL: [&str; 5] = [
    "model.model_dim=16",
    "model.num_heads=2",
    "model.num_layers=1",
    "model.ffn_dim=32",
    "train.max_epochs=2",
];

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn write_rows(&self, name: &str, rows: &[RawExample]) -> PathBuf {
        let p = self.path(name);
        write_csv(fs::File::create(&p).unwrap(), rows).unwrap();
        p
    }

    fn write(&self, name: &str, content: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, content).unwrap();
        p
    }

    /// Runs the binary with `paths.output_dir` pointing into the workspace.
    fn run(&self, args: &[&str], sets: &[String]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sentispan"));
        cmd.args(args);
        cmd.arg("--set").arg(format!("paths.output_dir={}", self.out().display()));
        for s in sets {
            cmd.arg("--set").arg(s);
        }
        cmd.output().unwrap()
    }
}

fn set(key: &str, path: &Path) -> String {
    format!("{key}={}", path.display())
}

fn small(extra: &[String]) -> Vec<String> {
    SMALL_MODEL.iter().map(|s| s.to_string()).chain(extra.iter().cloned()).collect()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("no record in {stderr}"));
    serde_json::from_str(line).unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn prepare_table_fixture() {
    let ws = Workspace::new();
    let csv = ws.write_rows("table.csv", &fixtures::table_rows());
    let out = ws.run(&["prepare", "--findings"], &[set("paths.train", &csv)]);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(read_jsonl(&ws.out().join("prepared/train.jsonl")).len(), 7);

    let audit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.out().join("alignment_audit.json")).unwrap()).unwrap();
    let train = &audit["splits"][0];
    assert_eq!(train["split"], "train");
    assert_eq!(train["prepared"], 7);
    assert_eq!(train["alignment_failed"], 0);
    assert!(train["crossed_span"].is_u64());
    assert_eq!(fs::read_to_string(ws.out().join("findings.jsonl")).unwrap(), "");

    let vocab = Vocab::load(ws.out().join("vocab.txt")).unwrap();
    for word in ["extract", "context", "positive", "negative", "neutral"] {
        assert!(vocab.id(word).is_some(), "{word}");
    }
    let effective = RunConfig::load(Some(&ws.out().join("prepare.config.toml")), &[]).unwrap();
    assert_eq!(effective.paths.train.as_deref(), Some(csv.as_path()));
}

#[test]
fn prepare_reports_alignment_failures_and_findings() {
    let ws = Workspace::new();
    let mut rows = fixtures::table_rows();
    rows.push(RawExample::new("bad", "nothing to see", Some("absent words"), sentispan::Sentiment::Neutral));
    let csv = ws.write_rows("rows.csv", &rows);
    let out = ws.run(&["prepare", "--findings"], &[set("paths.train", &csv)]);
    assert!(out.status.success());
    let audit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.out().join("alignment_audit.json")).unwrap()).unwrap();
    assert_eq!(audit["splits"][0]["alignment_failed"], 1);
    assert_eq!(audit["splits"][0]["failures"][0]["id"], "bad");
    assert_eq!(audit["splits"][0]["failures"][0]["reason"], "no_match");
    let findings = read_jsonl(&ws.out().join("findings.jsonl"));
    assert_eq!(findings.len(), 1);
    assert_eq!(findings[0]["finding"], "SubstringViolation");
}

#[test]
fn prepare_empty_inputs() {
    for content in ["", "textID,text,selected_text,sentiment\n"] {
        let ws = Workspace::new();
        let csv = ws.write("empty.csv", content);
        let out = ws.run(&["prepare"], &[set("paths.train", &csv)]);
        assert!(out.status.success(), "{out:?}");
        assert_eq!(fs::read_to_string(ws.out().join("prepared/train.jsonl")).unwrap(), "");
    }
}

#[test]
fn prepare_missing_sentiment_column() {
    let ws = Workspace::new();
    let csv = ws.write("nosent.csv", "textID,text,selected_text\n1,hello there,hello\n");
    let out = ws.run(&["prepare"], &[set("paths.train", &csv)]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "MissingColumn");
    assert_eq!(rec["exit_code"], 2);
}

#[test]
fn missing_inputs_and_bad_config_fail() {
    let ws = Workspace::new();
    let out = ws.run(&["prepare"], &[set("paths.train", &ws.path("nope.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "MissingInput");

    let out = ws.run(&["prepare"], &[]);
    assert_eq!(out.status.code(), Some(1));

    let out = ws.run(&["train"], &[]);
    assert_eq!(out.status.code(), Some(2));

    let out = ws.run(&["train"], &["model.bogus=1".into()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"], "InvalidConfig");
}

#[test]
fn config_file_with_overrides() {
    let ws = Workspace::new();
    let csv = ws.write_rows("table.csv", &fixtures::table_rows());
    let config = ws.write(
        "run.toml",
        &format!(
            "seed = 3\nvocab_max_size = 16\n[paths]\ntrain = {:?}\n[train]\nlearning_rate = 0.01\n",
            csv.display().to_string()
        ),
    );
    let out = ws.run(&["prepare", "--config", config.to_str().unwrap()], &["seed=4".into()]);
    assert!(out.status.success(), "{out:?}");
    let effective = RunConfig::load(Some(&ws.out().join("prepare.config.toml")), &[]).unwrap();
    assert_eq!(effective.seed, 4);
    assert_eq!(effective.train.learning_rate, 0.01);
    assert_eq!(Vocab::load(ws.out().join("vocab.txt")).unwrap().size(), 16);
}

fn prepare_and_train(ws: &Workspace, rows: &[RawExample], extra: &[String]) -> Vec<String> {
    let csv = ws.write_rows("train.csv", rows);
    let mut sets = small(extra);
    sets.push(set("paths.train", &csv));
    assert!(ws.run(&["prepare"], &sets).status.success());
    let out = ws.run(&["train"], &sets);
    assert!(out.status.success(), "{out:?}");
    sets
}

#[test]
fn training_is_reproducible_across_runs() {
    let rows = fixtures::overfit_corpus(20, 1);
    let a = Workspace::new();
    let b = Workspace::new();
    prepare_and_train(&a, &rows, &["split_ratios=[0.6, 0.2, 0.2]".into()]);
    prepare_and_train(&b, &rows, &["split_ratios=[0.6, 0.2, 0.2]".into()]);
    for file in ["checkpoints/best.json", "checkpoints/epoch-001.json", "checkpoints/epoch-002.json", "train_log.jsonl", "prepared/validation.jsonl"] {
        assert_eq!(fs::read(a.out().join(file)).unwrap(), fs::read(b.out().join(file)).unwrap(), "{file}");
    }
    let log = read_jsonl(&a.out().join("train_log.jsonl"));
    assert!(log.iter().any(|e| e["split"] == "validation"));
    assert!(a.out().join("train.config.toml").is_file());
}

#[test]
fn eval_writes_report_and_rejects_mismatched_checkpoint() {
    let ws = Workspace::new();
    let sets = prepare_and_train(&ws, &fixtures::table_rows(), &[]);
    let out = ws.run(&["eval"], &sets);
    assert!(out.status.success(), "{out:?}");
    let table = stdout(&out);
    assert_eq!(table, fs::read_to_string(ws.out().join("eval_table.txt")).unwrap());
    assert!(table.lines().nth(1).unwrap().starts_with("train"));

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.out().join("eval_report.json")).unwrap()).unwrap();
    let train = &report["splits"][0]["report"];
    let per: Vec<f64> = train["per_example"].as_array().unwrap().iter().map(|e| e["jaccard"].as_f64().unwrap()).collect();
    assert_eq!(per.len(), 7);
    assert_eq!(train["mean_jaccard"].as_f64().unwrap(), per.iter().sum::<f64>() / 7.0);
    assert!(report["splits"][0]["mean_raw_jaccard"].is_f64());

    let mut wider = sets.clone();
    wider.push("model.model_dim=32".into());
    let out = ws.run(&["eval"], &wider);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "ShapeMismatch");
}

#[test]
fn predict_with_rigged_full_span_model() {
    let ws = Workspace::new();
    let sets = prepare_and_train(&ws, &fixtures::table_rows(), &[]);
    let text = "my boss is bullying me...";
    let vocab = Vocab::load(ws.out().join("vocab.txt")).unwrap();
    let n_tokens = vocab.encode_content(text).len();
    let cfg = RunConfig::load(None, &sets).unwrap();
    // prompt prefix `extract: s </s> <s> context :` is 8 tokens
    let rig = fixtures::rigged_span_model(&cfg.model_config(vocab.size()), 8, 8 + n_tokens - 1, 20.0);
    let ckpt = ws.path("rig.json");
    rig.save(&ckpt).unwrap();
    let ckpt = ckpt.to_str().unwrap();

    let out = ws.run(&["predict", "--checkpoint", ckpt, "--text", text, "--sentiment", "Negative"], &sets);
    assert!(out.status.success(), "{out:?}");
    assert_eq!(stdout(&out).trim_end(), normalize(text));

    let out = ws.run(&["predict", "--checkpoint", ckpt, "--text", "  ", "--sentiment", "negative"], &sets);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"], "EmptyText");

    let out = ws.run(&["predict", "--checkpoint", ckpt, "--text", "hi", "--sentiment", "angry"], &sets);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_alignment_lines_and_corruption() {
    let ws = Workspace::new();
    let csv = ws.write_rows("table.csv", &fixtures::table_rows());
    let sets = vec![set("paths.train", &csv)];
    assert!(ws.run(&["prepare"], &sets).status.success());
    let out = ws.run(&["inspect-alignment"], &sets);
    assert!(out.status.success(), "{out:?}");
    let lines = read_jsonl(&ws.out().join("alignment_inspect.jsonl"));
    assert_eq!(lines.len(), 7);
    for line in &lines {
        let j = line["round_trip_jaccard"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&j));
        let expected = jaccard(line["decoded_span"].as_str().unwrap(), line["reference"].as_str().unwrap());
        assert_eq!(j, expected);
    }

    let prepared = ws.out().join("prepared/train.jsonl");
    let mut text = fs::read_to_string(&prepared).unwrap();
    text.push_str("{\"id\": \"broken\"\n");
    fs::write(&prepared, text).unwrap();
    let out = ws.run(&["inspect-alignment"], &sets);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "CorruptPreparedFile");

    let empty = Workspace::new();
    let csv = empty.write("e.csv", "");
    let sets = vec![set("paths.train", &csv)];
    assert!(empty.run(&["prepare"], &sets).status.success());
    assert!(empty.run(&["inspect-alignment"], &sets).status.success());
    assert_eq!(fs::read_to_string(empty.out().join("alignment_inspect.jsonl")).unwrap(), "");
}

#[test]
fn overfit_run_memorizes_through_the_cli() {
    let ws = Workspace::new();
    let rows = fixtures::overfit_corpus(64, 7);
    let csv = ws.write_rows("train.csv", &rows);
    let sets = vec![
        set("paths.train", &csv),
        "seed=7".into(),
        "max_source_length=64".into(),
        "train.learning_rate=0.002".into(),
        "train.batch_size=8".into(),
        "train.max_epochs=60".into(),
    ];
    assert!(ws.run(&["prepare"], &sets).status.success());
    assert!(ws.run(&["train"], &sets).status.success());
    let out = ws.run(&["eval"], &sets);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.out().join("eval_report.json")).unwrap()).unwrap();
    assert!(report["splits"][0]["report"]["mean_jaccard"].as_f64().unwrap() >= 0.9);

    let ex = &rows[1];
    let out = ws.run(&["predict", "--text", &ex.text, "--sentiment", "negative"], &sets);
    assert!(out.status.success());
    assert!(jaccard(stdout(&out).trim(), ex.selected_text.as_deref().unwrap()) >= 0.8);

    let best = Params::load(ws.out().join("checkpoints/best.json")).unwrap();
    assert_eq!(best.config().seed, 7);
}
