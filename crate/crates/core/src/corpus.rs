//! Tweet-sentiment dataset ingestion: CSV loading, row validation and
//! deterministic train/validation/test splitting.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("header lacks required column `{0}`")]
    MissingColumn(&'static str),
    #[error("malformed csv: {0}")]
    MalformedCsv(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = String;

    /// Case-insensitive after trimming.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            _ => Err(s.to_string()),
        }
    }
}

/// One dataset row.
///
/// `sentiment` is `None` when the file carried a label outside the three
/// polarities; [`validate_example`] reports it as [`Finding::UnknownSentiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub text: String,
    pub selected_text: Option<String>,
    pub sentiment: Option<Sentiment>,
}

impl RawExample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        selected_text: Option<&str>,
        sentiment: Sentiment,
    ) -> Self {
        RawExample {
            id: id.into(),
            text: text.into(),
            selected_text: selected_text.map(str::to_string),
            sentiment: Some(sentiment),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Finding {
    SubstringViolation,
    EmptySelectedText,
    UnknownSentiment,
}

/// Result of [`load_csv`]: the admitted rows plus how many were dropped for
/// a missing or blank `text` field.
#[derive(Debug, Clone, Default)]
pub struct LoadedCsv {
    pub examples: Vec<RawExample>,
    pub excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<RawExample>,
    pub validation: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

struct Columns {
    id: Option<usize>,
    text: usize,
    selected_text: Option<usize>,
    sentiment: usize,
}

impl Columns {
    fn locate(headers: &csv::StringRecord) -> Result<Self, CorpusError> {
        let find = |names: &[&str]| {
            headers
                .iter()
                .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
        };
        Ok(Columns {
            id: find(&["textID", "id"]),
            text: find(&["text"]).ok_or(CorpusError::MissingColumn("text"))?,
            selected_text: find(&["selected_text", "selected text"]),
            sentiment: find(&["sentiment"]).ok_or(CorpusError::MissingColumn("sentiment"))?,
        })
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedCsv, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv(&raw)
}

/// Parses CSV text (header row required, RFC-4180 quoting).
pub fn parse_csv(raw: &str) -> Result<LoadedCsv, CorpusError> {
    // Every quote in a well-formed file is either a delimiter or part of a
    // doubled pair, so an odd count means an unterminated field.
    if raw.bytes().filter(|&b| b == b'"').count() % 2 == 1 {
        return Err(CorpusError::MalformedCsv("unbalanced quotes".into()));
    }
    if raw.trim().is_empty() {
        return Err(CorpusError::MissingColumn("text"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::MalformedCsv(e.to_string()))?
        .clone();
    let cols = Columns::locate(&headers)?;

    let mut out = LoadedCsv::default();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::MalformedCsv(e.to_string()))?;
        let text = record.get(cols.text).unwrap_or("");
        if text.trim().is_empty() {
            out.excluded += 1;
            continue;
        }
        let id = cols
            .id
            .and_then(|i| record.get(i))
            .filter(|s| !s.trim().is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| format!("row-{row}"));
        let selected_text = cols
            .selected_text
            .and_then(|i| record.get(i))
            .map(str::to_string);
        let sentiment = record.get(cols.sentiment).and_then(|s| s.parse().ok());
        out.examples.push(RawExample {
            id,
            text: text.to_string(),
            selected_text,
            sentiment,
        });
    }
    Ok(out)
}

/// Serializes examples with the canonical header `textID,text,selected_text,sentiment`.
pub fn write_csv<W: std::io::Write>(writer: W, examples: &[RawExample]) -> Result<(), CorpusError> {
    let mut w = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| CorpusError::MalformedCsv(e.to_string());
    w.write_record(["textID", "text", "selected_text", "sentiment"])
        .map_err(wrap)?;
    for ex in examples {
        w.write_record([
            ex.id.as_str(),
            ex.text.as_str(),
            ex.selected_text.as_deref().unwrap_or(""),
            ex.sentiment.map(Sentiment::as_str).unwrap_or(""),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|source| CorpusError::Io {
        path: "<writer>".into(),
        source,
    })
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn validate_example(ex: &RawExample) -> Vec<Finding> {
    let mut findings = Vec::new();
    if let Some(selected) = &ex.selected_text {
        let selected = collapse_whitespace(selected);
        if selected.is_empty() {
            findings.push(Finding::EmptySelectedText);
        } else if !collapse_whitespace(&ex.text).contains(&selected) {
            findings.push(Finding::SubstringViolation);
        }
    }
    if ex.sentiment.is_none() {
        findings.push(Finding::UnknownSentiment);
    }
    findings
}

/// Shuffles with a seeded permutation, then cuts at the rounded cumulative
/// ratio boundaries, so each part is within one example of `ratio * n`.
pub fn split_dataset(
    examples: &[RawExample],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, CorpusError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let n = examples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let cut1 = ((ratios[0] * n as f64).round() as usize).min(n);
    let cut2 = (((ratios[0] + ratios[1]) * n as f64).round() as usize).clamp(cut1, n);
    let take = |range: std::ops::Range<usize>| -> Vec<RawExample> {
        order[range].iter().map(|&i| examples[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..cut1),
        validation: take(cut1..cut2),
        test: take(cut2..n),
    })
}
