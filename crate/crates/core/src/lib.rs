//! Extractive sentiment-span prediction.
//!
//! Given a tweet and a sentiment label, predict the contiguous token span
//! that carries the sentiment. The pipeline formats a question-style prompt
//! (`extract: {sentiment}</s><s>context: {text}`), aligns the annotated
//! span to token positions, trains a small transformer encoder with a
//! start/end head on softmax cross-entropy, and decodes the best-scoring
//! `start <= end` pair, scored by word-set Jaccard.

pub mod cli;
pub mod corpus;
pub mod evaluator;
pub mod fixtures;
pub mod model;
pub mod spanprep;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{RawExample, Sentiment};
pub use evaluator::{decode_span, evaluate, extract_answer, jaccard, EvalReport};
pub use model::{forward, forward_batch, ModelConfig, Params, SpanLogits};
pub use spanprep::{align, TokenizedExample};
pub use tokenizer::Vocab;
pub use trainer::{span_cross_entropy, train, TrainConfig};
