//! Small built-in datasets and hand-wired models for tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{RawExample, Sentiment};
use crate::model::{GroupKind, ModelConfig, Params};

/// The seven labelled tweets of the reference dataset sample.
pub fn table_rows() -> Vec<RawExample> {
    use Sentiment::*;
    let rows: [(&str, &str, Sentiment); 7] = [
        (
            "Sooo SAD I will miss you here in San Diego!!!",
            "Sooo SAD",
            Negative,
        ),
        ("my boss is bullying me...", "bullying me", Negative),
        ("Soooo high", "Soooo high", Neutral),
        (
            "Journey!? Wow... u just became cooler. hehe... (is that possible!?)",
            "Wow... u just became cooler.",
            Positive,
        ),
        (
            "2am feedings for the baby are fun when he is all smiles and coos",
            "fun",
            Positive,
        ),
        (
            "as much as i love to be hopeful, i reckon the chances are minimal =P i'm never gonna get my cake and...",
            "as much as i love to be hopeful, i reckon the chances are minimal =P i'm never gonna get my cake and...",
            Neutral,
        ),
        (
            "i want to go to music tonight but i lost my voice.",
            "lost",
            Negative,
        ),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (text, sel, s))| RawExample::new(format!("table-{i}"), *text, Some(sel), *s))
        .collect()
}

const SUBJECTS: [&str; 12] = [
    "the weather", "my new phone", "this song", "work today", "the game", "our trip",
    "that movie", "my coffee", "the traffic", "dinner tonight", "the concert", "class",
];
const POSITIVE_ADJ: [&str; 6] = ["great", "awesome", "amazing", "wonderful", "lovely", "perfect"];
const NEGATIVE_ADJ: [&str; 6] = ["terrible", "awful", "horrible", "boring", "painful", "gross"];
const POSITIVE_VERB: [&str; 4] = ["love", "enjoy", "adore", "like"];
const NEGATIVE_VERB: [&str; 4] = ["hate", "dislike", "dread", "miss"];
const TAILS: [&str; 6] = ["", " lol", " tbh", "!!", " haha", " ugh"];
const NEUTRAL_TEMPLATES: [&str; 4] = [
    "going to {s} later with friends",
    "just checked {s} on my way home",
    "anyone else watching {s} right now",
    "thinking about {s} and stuff",
];

/// Short synthetic tweets whose sentiment phrase is unambiguous.
pub fn synthetic_rows(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let subject = *SUBJECTS.choose(&mut rng).unwrap();
        let tail = *TAILS.choose(&mut rng).unwrap();
        let (text, selected, sentiment) = match rng.gen_range(0..5) {
            0 | 1 => {
                let positive = rng.gen_bool(0.5);
                let adj = *if positive { &POSITIVE_ADJ } else { &NEGATIVE_ADJ }
                    .choose(&mut rng)
                    .unwrap();
                let s = if positive { Sentiment::Positive } else { Sentiment::Negative };
                (format!("{subject} was so {adj} today{tail}"), format!("so {adj}"), s)
            }
            2 | 3 => {
                let positive = rng.gen_bool(0.5);
                let verb = *if positive { &POSITIVE_VERB } else { &NEGATIVE_VERB }
                    .choose(&mut rng)
                    .unwrap();
                let s = if positive { Sentiment::Positive } else { Sentiment::Negative };
                (format!("i really {verb} {subject}{tail}"), verb.to_string(), s)
            }
            _ => {
                let t = NEUTRAL_TEMPLATES.choose(&mut rng).unwrap().replace("{s}", subject);
                (t.clone(), t, Sentiment::Neutral)
            }
        };
        if seen.insert(text.clone()) {
            out.push(RawExample::new(format!("syn-{}", out.len()), text, Some(&selected), sentiment));
        }
    }
    out
}

/// Table rows followed by synthetic rows, `n` in total.
pub fn overfit_corpus(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rows = table_rows();
    rows.truncate(n);
    let extra = n - rows.len();
    rows.extend(synthetic_rows(extra, seed));
    rows
}

/// Parameters that score position `start` highest for starts and `end`
/// highest for ends, independent of token ids. Every block weight is zero
/// so the encoder output is the normalised position embedding, which the
/// head reads along two orthogonal directions. Needs `model_dim >= 6`.
pub fn rigged_span_model(config: &ModelConfig, start: usize, end: usize, strength: f64) -> Params {
    assert!(config.model_dim >= 6, "rig needs model_dim >= 6");
    let mut params = Params::init(config);
    for g in params.groups().to_vec() {
        match g.kind {
            GroupKind::Norm1Scale | GroupKind::Norm2Scale => {}
            _ => params.values_mut()[g.range()].fill(0.0),
        }
    }
    {
        let mut pos = params.matrix_mut(GroupKind::PositionEmbedding, None);
        for (k, mut row) in pos.outer_iter_mut().enumerate() {
            if k == start {
                row[0] = 1.0;
                row[1] = -1.0;
            }
            if k == end {
                row[2] = 1.0;
                row[3] = -1.0;
            }
            if k != start && k != end {
                row[4] = 1.0;
                row[5] = -1.0;
            }
        }
    }
    let mut head = params.matrix_mut(GroupKind::HeadWeight, None);
    head[[0, 0]] = strength;
    head[[1, 0]] = -strength;
    head[[2, 1]] = strength;
    head[[3, 1]] = -strength;
    params
}
