//! Word-level tokenizer with punctuation splitting, lowercasing and five
//! reserved special tokens.
//!
//! Content text is split on whitespace, and every non-alphanumeric character
//! becomes a token of its own (`"me..."` → `me . . .`). The literal markers
//! `<s>` and `</s>` map to the sequence-begin and sequence-end ids, so a
//! formatted prompt such as `extract: positive</s><s>context: ...` carries
//! genuine separator tokens. A newline maps to its own special id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOS_TOKEN: &str = "<s>";
pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const NEWLINE_TOKEN: &str = "<nl>";

/// Specials in their reserved id order 0..4.
pub const SPECIAL_TOKENS: [&str; 5] = [BOS_TOKEN, PAD_TOKEN, EOS_TOKEN, UNK_TOKEN, NEWLINE_TOKEN];

pub const MIN_VOCAB_SIZE: usize = 16;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab max_size {0} is below the minimum of {MIN_VOCAB_SIZE}")]
    VocabTooSmall(usize),
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("i/o error on vocab file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid vocab file: {0}")]
    InvalidVocabFile(String),
}

/// Ids of the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialIds {
    pub bos: u32,
    pub pad: u32,
    pub eos: u32,
    pub unk: u32,
    pub newline: u32,
}

impl SpecialIds {
    const FIXED: SpecialIds = SpecialIds {
        bos: 0,
        pad: 1,
        eos: 2,
        unk: 3,
        newline: 4,
    };

    /// The ids dropped when decoding with `skip_specials` and ignored during
    /// gold-span search: bos, eos, pad and newline (unk is content).
    pub fn is_skippable(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.pad || id == self.newline
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    specials: SpecialIds,
}

/// A piece of raw text after separator scanning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Piece<'a> {
    Bos,
    Eos,
    Newline,
    Text(&'a str),
}

/// Splits text at `<s>`, `</s>` and `\n`, leaving ordinary text segments.
pub(crate) fn scan_pieces(text: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut seg_start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        let marker = if text[i..].starts_with(EOS_TOKEN) {
            Some((Piece::Eos, EOS_TOKEN.len()))
        } else if text[i..].starts_with(BOS_TOKEN) {
            Some((Piece::Bos, BOS_TOKEN.len()))
        } else if bytes[i] == b'\n' {
            Some((Piece::Newline, 1))
        } else {
            None
        };
        match marker {
            Some((piece, len)) => {
                if seg_start < i {
                    pieces.push(Piece::Text(&text[seg_start..i]));
                }
                pieces.push(piece);
                i += len;
                seg_start = i;
            }
            None => i += 1,
        }
    }
    if seg_start < bytes.len() {
        pieces.push(Piece::Text(&text[seg_start..]));
    }
    pieces
}

/// Lowercased word and punctuation tokens of a plain text segment.
pub fn word_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() || c == '_' {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

/// The form `decode(encode(text), true)` takes for fully in-vocab text.
pub fn normalize(text: &str) -> String {
    scan_pieces(text)
        .into_iter()
        .filter_map(|p| match p {
            Piece::Text(t) => Some(word_tokens(t)),
            _ => None,
        })
        .flatten()
        .collect::<Vec<_>>()
        .join(" ")
}

impl Vocab {
    /// Reserves ids 0..4 for the specials and fills the remaining slots with
    /// the most frequent content tokens, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self, TokenizerError> {
        if max_size < MIN_VOCAB_SIZE {
            return Err(TokenizerError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for piece in scan_pieces(text.as_ref()) {
                if let Piece::Text(t) = piece {
                    for tok in word_tokens(t) {
                        *counts.entry(tok).or_default() += 1;
                    }
                }
            }
        }
        for special in SPECIAL_TOKENS {
            counts.remove(special);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());

        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(id_to_token: Vec<String>) -> Result<Self, TokenizerError> {
        if id_to_token.len() < SPECIAL_TOKENS.len()
            || id_to_token[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS
        {
            return Err(TokenizerError::InvalidVocabFile(
                "first five entries must be the special tokens in fixed order".into(),
            ));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(TokenizerError::InvalidVocabFile(format!(
                    "token at id {id} is empty or contains whitespace"
                )));
            }
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(TokenizerError::InvalidVocabFile(format!(
                    "duplicate token {tok:?}"
                )));
            }
        }
        Ok(Vocab {
            token_to_id,
            id_to_token,
            specials: SpecialIds::FIXED,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Content tokens (everything after the specials) in id order.
    pub fn content_tokens(&self) -> &[String] {
        &self.id_to_token[SPECIAL_TOKENS.len()..]
    }

    /// `[bos] + content ids + [eos]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![self.specials.bos];
        ids.extend(self.encode_content(text));
        ids.push(self.specials.eos);
        ids
    }

    /// Token ids of `text` without the surrounding bos/eos pair.
    pub fn encode_content(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in scan_pieces(text) {
            match piece {
                Piece::Bos => ids.push(self.specials.bos),
                Piece::Eos => ids.push(self.specials.eos),
                Piece::Newline => ids.push(self.specials.newline),
                Piece::Text(t) => ids.extend(
                    word_tokens(t)
                        .iter()
                        .map(|tok| self.id(tok).unwrap_or(self.specials.unk)),
                ),
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32], skip_specials: bool) -> Result<String, TokenizerError> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.size(),
            })?;
            if skip_specials && self.specials.is_skippable(id) {
                continue;
            }
            words.push(tok);
        }
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        let mut body = self.id_to_token.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|source| TokenizerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(body.lines().map(str::to_string).collect())
    }
}
