//! Prompt/target formatting and gold-span alignment.
//!
//! A source sequence is the encoded prompt
//! `extract: {sentiment}</s><s>context: {text}`, right-padded to
//! `max_source_length`. The gold span is recovered purely at token-id level:
//! the first non-special target id is searched forward from the start of the
//! context, the last one backward, each loop stopping at its first hit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{RawExample, Sentiment};
use crate::tokenizer::{SpecialIds, TokenizerError, Vocab};

pub const DEFAULT_MAX_SOURCE_LENGTH: usize = 96;

const SOURCE_PREFIX: &str = "extract: ";
const CONTEXT_LABEL: &str = "context: ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("alignment failed for {id}: {reason}")]
    AlignmentFailed { id: String, reason: AlignFailure },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignFailure {
    /// No non-special target id occurs in the context region.
    NoMatch,
    /// The target holds nothing but skip-set ids.
    EmptyTarget,
    /// The gold span lies beyond `max_source_length`.
    Truncated,
    /// The example carries no selected text or no usable sentiment.
    MissingLabel,
    /// The source lacks the `<s>context:` separator.
    NoContext,
}

impl std::fmt::Display for AlignFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AlignFailure::NoMatch => "no target token occurs in the context",
            AlignFailure::EmptyTarget => "target has no content tokens",
            AlignFailure::Truncated => "gold span falls outside the truncated source",
            AlignFailure::MissingLabel => "missing selected text or sentiment",
            AlignFailure::NoContext => "source has no context separator",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignFlag {
    /// The forward and backward searches crossed and were swapped.
    CrossedSpan,
    /// The source was cut to `max_source_length`; the span survived.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub id: String,
    pub source_ids: Vec<u32>,
    pub source_mask: Vec<u8>,
    pub target_ids: Vec<u32>,
    pub start_position: usize,
    pub end_position: usize,
    #[serde(default)]
    pub flags: Vec<AlignFlag>,
}

impl TokenizedExample {
    pub fn max_source_length(&self) -> usize {
        self.source_ids.len()
    }

    /// Number of real (unmasked) tokens.
    pub fn real_len(&self) -> usize {
        self.source_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Decoded text of the gold span `source_ids[start..=end]`.
    pub fn gold_text(&self, vocab: &Vocab) -> Result<String, TokenizerError> {
        vocab.decode(&self.source_ids[self.start_position..=self.end_position], true)
    }

    /// Checks bounds, mask consistency and right padding.
    pub fn check_invariants(&self, pad: u32) -> Result<(), String> {
        let len = self.source_ids.len();
        if self.source_mask.len() != len {
            return Err("mask length differs from source length".into());
        }
        if !(self.start_position <= self.end_position && self.end_position < len) {
            return Err(format!(
                "positions {}..={} out of order or beyond {len}",
                self.start_position, self.end_position
            ));
        }
        if self.source_mask[self.start_position] != 1 || self.source_mask[self.end_position] != 1 {
            return Err("gold position is masked".into());
        }
        let real = self.real_len();
        for (k, (&id, &m)) in self.source_ids.iter().zip(&self.source_mask).enumerate() {
            if m > 1 {
                return Err(format!("mask value {m} at {k}"));
            }
            if (m == 0) != (id == pad) {
                return Err(format!("pad/mask disagreement at {k}"));
            }
            if (k < real) != (m == 1) {
                return Err(format!("padding is not right-aligned at {k}"));
            }
        }
        Ok(())
    }
}

pub fn format_source(sentiment: Sentiment, text: &str) -> String {
    format!("{SOURCE_PREFIX}{sentiment}</s><s>{CONTEXT_LABEL}{text}")
}

pub fn format_target(selected_text: &str) -> String {
    format!(" {selected_text} </s>")
}

/// Index of the first context token: just past the second `<s>` and the
/// `context:` label that follows it.
pub fn context_begin(vocab: &Vocab, source_ids: &[u32]) -> Option<usize> {
    let bos = vocab.specials().bos;
    let second_bos = source_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == bos)
        .nth(1)
        .map(|(i, _)| i)?;
    let label = vocab.encode_content(CONTEXT_LABEL);
    let after = second_bos + 1;
    if source_ids.get(after..after + label.len()) == Some(label.as_slice()) {
        Some(after + label.len())
    } else {
        Some(after)
    }
}

/// Forward search: the first non-skip target id found in
/// `source_ids[context_begin..]` decides the start; target ids that never
/// occur are passed over.
pub fn find_start(
    source_ids: &[u32],
    target_ids: &[u32],
    context_begin: usize,
    specials: SpecialIds,
) -> Result<usize, AlignFailure> {
    let region = source_ids.get(context_begin..).unwrap_or(&[]);
    let mut saw_content = false;
    for &t in target_ids.iter().filter(|&&t| !specials.is_skippable(t)) {
        saw_content = true;
        if let Some(k) = region.iter().position(|&s| s == t) {
            return Ok(context_begin + k);
        }
    }
    Err(if saw_content {
        AlignFailure::NoMatch
    } else {
        AlignFailure::EmptyTarget
    })
}

/// Backward search: the last non-skip target id decides the end, at its
/// last occurrence in the context.
pub fn find_end(
    source_ids: &[u32],
    target_ids: &[u32],
    context_begin: usize,
    specials: SpecialIds,
) -> Result<usize, AlignFailure> {
    let region = source_ids.get(context_begin..).unwrap_or(&[]);
    let mut saw_content = false;
    for &t in target_ids.iter().rev().filter(|&&t| !specials.is_skippable(t)) {
        saw_content = true;
        if let Some(k) = region.iter().rposition(|&s| s == t) {
            return Ok(context_begin + k);
        }
    }
    Err(if saw_content {
        AlignFailure::NoMatch
    } else {
        AlignFailure::EmptyTarget
    })
}

/// Encodes a prompt and fits it to `max_source_length`: truncated at the
/// end when too long, right-padded otherwise. Returns `(ids, mask, truncated)`.
pub fn encode_source(
    vocab: &Vocab,
    sentiment: Sentiment,
    text: &str,
    max_source_length: usize,
) -> (Vec<u32>, Vec<u8>, bool) {
    let mut ids = vocab.encode(&format_source(sentiment, text));
    let truncated = ids.len() > max_source_length;
    ids.truncate(max_source_length);
    let real = ids.len();
    ids.resize(max_source_length, vocab.specials().pad);
    let mask = (0..max_source_length).map(|k| u8::from(k < real)).collect();
    (ids, mask, truncated)
}

pub fn align(
    vocab: &Vocab,
    ex: &RawExample,
    max_source_length: usize,
) -> Result<TokenizedExample, AlignError> {
    let fail = |reason| AlignError::AlignmentFailed {
        id: ex.id.clone(),
        reason,
    };
    let (Some(sentiment), Some(selected)) = (ex.sentiment, ex.selected_text.as_deref()) else {
        return Err(fail(AlignFailure::MissingLabel));
    };
    let specials = vocab.specials();
    let full_source = vocab.encode(&format_source(sentiment, &ex.text));
    let target_ids = vocab.encode(&format_target(selected));
    let begin = context_begin(vocab, &full_source).ok_or_else(|| fail(AlignFailure::NoContext))?;

    let start = find_start(&full_source, &target_ids, begin, specials).map_err(fail)?;
    let end = find_end(&full_source, &target_ids, begin, specials).map_err(fail)?;
    let mut flags = Vec::new();
    let (start_position, end_position) = if end < start {
        flags.push(AlignFlag::CrossedSpan);
        (end, start)
    } else {
        (start, end)
    };
    if end_position >= max_source_length {
        return Err(fail(AlignFailure::Truncated));
    }

    let (source_ids, source_mask, truncated) =
        encode_source(vocab, sentiment, &ex.text, max_source_length);
    if truncated {
        flags.push(AlignFlag::Truncated);
    }
    Ok(TokenizedExample {
        id: ex.id.clone(),
        source_ids,
        source_mask,
        target_ids,
        start_position,
        end_position,
        flags,
    })
}

/// Alignment outcome over a whole split; failures are kept, not dropped
/// silently.
#[derive(Debug, Clone, Default)]
pub struct PreparedSplit {
    pub examples: Vec<TokenizedExample>,
    pub failures: Vec<AlignError>,
}

impl PreparedSplit {
    pub fn crossed_count(&self) -> usize {
        self.count_flag(AlignFlag::CrossedSpan)
    }

    pub fn truncated_count(&self) -> usize {
        self.count_flag(AlignFlag::Truncated)
    }

    fn count_flag(&self, flag: AlignFlag) -> usize {
        self.examples
            .iter()
            .filter(|e| e.flags.contains(&flag))
            .count()
    }
}

/// Aligns every example of a split, in parallel, preserving input order.
pub fn encode_examples(
    vocab: &Vocab,
    examples: &[RawExample],
    max_source_length: usize,
) -> PreparedSplit {
    use rayon::prelude::*;
    let results: Vec<_> = examples
        .par_iter()
        .map(|ex| align(vocab, ex, max_source_length))
        .collect();
    let mut out = PreparedSplit::default();
    for r in results {
        match r {
            Ok(e) => out.examples.push(e),
            Err(e) => out.failures.push(e),
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum PreparedIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

/// One JSON object per line, fields in declaration order.
pub fn write_jsonl<W: Write>(mut w: W, examples: &[TokenizedExample]) -> std::io::Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Reads prepared examples, rejecting malformed lines and examples whose
/// structural invariants do not hold.
pub fn read_jsonl<R: BufRead>(
    r: R,
    vocab: &Vocab,
) -> Result<Vec<TokenizedExample>, PreparedIoError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| PreparedIoError::Corrupt {
            line: i + 1,
            message,
        };
        let ex: TokenizedExample =
            serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        ex.check_invariants(vocab.specials().pad).map_err(corrupt)?;
        if let Some(&bad) = ex
            .source_ids
            .iter()
            .chain(&ex.target_ids)
            .find(|&&id| id as usize >= vocab.size())
        {
            return Err(corrupt(format!("token id {bad} beyond vocab")));
        }
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::jaccard;

    const BOS: u32 = 0;
    const PAD: u32 = 1;
    const EOS: u32 = 2;
    // q1, q2, c1, c2, c3
    const Q1: u32 = 10;
    const Q2: u32 = 11;
    const C1: u32 = 20;
    const C2: u32 = 21;
    const C3: u32 = 22;

    fn specials() -> SpecialIds {
        Vocab::build::<&str>(&[], 16).unwrap().specials()
    }

    fn source() -> Vec<u32> {
        vec![BOS, Q1, Q2, EOS, BOS, C1, C2, C3, EOS]
    }

    /// Linear scan oracle written over (index, value) pairs directly.
    fn oracle_first(source: &[u32], target: &[u32], begin: usize) -> Option<usize> {
        let content: Vec<u32> = target.iter().copied().filter(|&t| t > 4).collect();
        for t in content {
            for (k, &s) in source.iter().enumerate() {
                if k >= begin && s == t {
                    return Some(k);
                }
            }
        }
        None
    }

    #[test]
    fn format_examples() {
        assert_eq!(
            format_source(Sentiment::Positive, "I love this movie!"),
            "extract: positive</s><s>context: I love this movie!"
        );
        assert_eq!(
            format_source(Sentiment::Negative, ""),
            "extract: negative</s><s>context: "
        );
        assert_eq!(
            format_source(Sentiment::Neutral, "Soooo high"),
            "extract: neutral</s><s>context: Soooo high"
        );
        assert_eq!(format_target("love"), " love </s>");
        assert_eq!(format_target(""), "  </s>");
        assert_eq!(format_target("Sooo SAD"), " Sooo SAD </s>");
    }

    #[test]
    fn find_start_examples() {
        let sp = specials();
        let target = [BOS, C2, EOS];
        assert_eq!(find_start(&source(), &target, 5, sp), Ok(6));
        assert_eq!(oracle_first(&source(), &target, 5), Some(6));
        assert_eq!(find_start(&source(), &[BOS, C1, C2, C3, EOS], 5, sp), Ok(5));
        assert_eq!(
            find_start(&source(), &[BOS, 99, EOS], 5, sp),
            Err(AlignFailure::NoMatch)
        );
        // prefix tokens are outside the search region
        assert_eq!(
            find_start(&source(), &[BOS, Q1, EOS], 5, sp),
            Err(AlignFailure::NoMatch)
        );
        // an unmatched leading id is passed over
        assert_eq!(find_start(&source(), &[BOS, 99, C3, EOS], 5, sp), Ok(7));
    }

    #[test]
    fn find_end_examples() {
        let sp = specials();
        assert_eq!(find_end(&source(), &[BOS, C1, C2, EOS], 5, sp), Ok(6));
        assert_eq!(find_end(&source(), &[BOS, C3, EOS], 5, sp), Ok(7));
        assert_eq!(
            find_end(&source(), &[BOS, EOS, PAD, 4], 5, sp),
            Err(AlignFailure::EmptyTarget)
        );
        let repeated = vec![BOS, Q1, EOS, BOS, C1, C2, C1, EOS];
        assert_eq!(find_end(&repeated, &[BOS, C1, EOS], 4, sp), Ok(6));
    }

    fn vocab_for(texts: &[&str]) -> Vocab {
        let mut corpus: Vec<String> = texts.iter().map(|t| t.to_string()).collect();
        corpus.push("extract: positive negative neutral context:".into());
        Vocab::build(&corpus, 256).unwrap()
    }

    fn span_text(v: &Vocab, ex: &TokenizedExample) -> String {
        v.decode(&ex.source_ids[ex.start_position..=ex.end_position], true)
            .unwrap()
    }

    #[test]
    fn align_table_row() {
        let text = "my boss is bullying me...";
        let v = vocab_for(&[text]);
        let ex = RawExample::new("b", text, Some("bullying me"), Sentiment::Negative);
        let t = align(&v, &ex, 24).unwrap();
        t.check_invariants(PAD).unwrap();
        assert_eq!(t.source_ids.len(), 24);
        let oracle = tokenizer_normalized_contains(text, "bullying me");
        assert!(oracle);
        assert!(jaccard(&span_text(&v, &t), "bullying me") >= 0.8);
        assert!(t.flags.is_empty());
    }

    fn tokenizer_normalized_contains(text: &str, sel: &str) -> bool {
        crate::tokenizer::normalize(text).contains(&crate::tokenizer::normalize(sel))
    }

    #[test]
    fn whole_context_span() {
        let text = "Soooo high";
        let v = vocab_for(&[text]);
        let ex = RawExample::new("n", text, Some(text), Sentiment::Neutral);
        let t = align(&v, &ex, 32).unwrap();
        let begin = context_begin(&v, &t.source_ids).unwrap();
        assert_eq!(t.start_position, begin);
        assert_eq!(t.end_position, t.real_len() - 2); // last token before final eos
        assert_eq!(span_text(&v, &t), "soooo high");
    }

    #[test]
    fn single_token_span() {
        let v = vocab_for(&["wow"]);
        let ex = RawExample::new("w", "wow", Some("wow"), Sentiment::Positive);
        let t = align(&v, &ex, 16).unwrap();
        assert_eq!(t.start_position, t.end_position);
    }

    #[test]
    fn sentiment_word_in_tweet_is_not_matched_in_prefix() {
        let text = "so positive about it";
        let v = vocab_for(&[text]);
        let ex = RawExample::new("p", text, Some("positive"), Sentiment::Positive);
        let t = align(&v, &ex, 32).unwrap();
        assert!(t.start_position >= context_begin(&v, &t.source_ids).unwrap());
        assert_eq!(span_text(&v, &t), "positive");
    }

    #[test]
    fn crossed_search_is_swapped_and_flagged() {
        // first target token "b" occurs late, last target token "a" early
        let text = "a x b";
        let v = vocab_for(&[text]);
        let ex = RawExample::new("c", text, Some("b q a"), Sentiment::Neutral);
        let t = align(&v, &ex, 32).unwrap();
        assert!(t.flags.contains(&AlignFlag::CrossedSpan));
        assert!(t.start_position <= t.end_position);
        assert_eq!(span_text(&v, &t), "a x b");
    }

    #[test]
    fn truncation() {
        let text = "one two three four five six seven eight";
        let v = vocab_for(&[text]);
        // prefix is 9 tokens: <s> extract : neutral </s> <s> context : ... ; "one" at 8
        let early = RawExample::new("t", text, Some("one two"), Sentiment::Neutral);
        let t = align(&v, &early, 12).unwrap();
        assert!(t.flags.contains(&AlignFlag::Truncated));
        assert_eq!(t.real_len(), 12);
        t.check_invariants(PAD).unwrap();

        let late = RawExample::new("t", text, Some("eight"), Sentiment::Neutral);
        assert_eq!(
            align(&v, &late, 12),
            Err(AlignError::AlignmentFailed {
                id: "t".into(),
                reason: AlignFailure::Truncated
            })
        );
    }

    #[test]
    fn missing_label_fails() {
        let v = vocab_for(&["abc"]);
        let ex = RawExample {
            id: "m".into(),
            text: "abc".into(),
            selected_text: None,
            sentiment: Some(Sentiment::Neutral),
        };
        assert!(matches!(
            align(&v, &ex, 16),
            Err(AlignError::AlignmentFailed {
                reason: AlignFailure::MissingLabel,
                ..
            })
        ));
    }

    #[test]
    fn jsonl_round_trip_and_corruption() {
        let text = "my boss is bullying me...";
        let v = vocab_for(&[text]);
        let ex = RawExample::new("b", text, Some("bullying me"), Sentiment::Negative);
        let t = align(&v, &ex, 24).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&t)).unwrap();
        assert_eq!(read_jsonl(buf.as_slice(), &v).unwrap(), vec![t]);

        assert!(read_jsonl("{not json\n".as_bytes(), &v).is_err());
        let line = String::from_utf8(buf).unwrap().replace("\"end_position\":", "\"end_position\":9");
        assert!(read_jsonl(line.as_bytes(), &v).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn aligned_examples_satisfy_invariants(
                words in prop::collection::vec(0usize..8, 1..30),
                a in 0usize..30, b in 0usize..30,
                max_len in 8usize..48,
            ) {
                let lexicon = ["good", "bad", "day", "the", "is", "!", "very", "fine"];
                let toks: Vec<&str> = words.iter().map(|&w| lexicon[w]).collect();
                let text = toks.join(" ");
                let (lo, hi) = (a.min(b) % toks.len(), a.max(b) % toks.len());
                let (lo, hi) = (lo.min(hi), lo.max(hi));
                let selected = toks[lo..=hi].join(" ");
                let v = vocab_for(&[&text]);
                let ex = RawExample::new("p", &text, Some(&selected), Sentiment::Positive);
                match align(&v, &ex, max_len) {
                    Ok(t) => {
                        prop_assert!(t.check_invariants(PAD).is_ok());
                        prop_assert_eq!(&t, &align(&v, &ex, max_len).unwrap());
                    }
                    Err(AlignError::AlignmentFailed { reason, .. }) => {
                        prop_assert_eq!(reason, AlignFailure::Truncated);
                    }
                }
            }
        }
    }
}
