use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;

/// What a parameter tensor does; the layout is fixed by [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    TokenEmbedding,
    PositionEmbedding,
    Query,
    Key,
    Value,
    AttnOutput,
    FfnIn,
    FfnInBias,
    FfnOut,
    FfnOutBias,
    Norm1Scale,
    Norm1Offset,
    Norm2Scale,
    Norm2Offset,
    HeadWeight,
    HeadBias,
}

pub(crate) const LAYER_KINDS: [GroupKind; 12] = [
    GroupKind::Query,
    GroupKind::Key,
    GroupKind::Value,
    GroupKind::AttnOutput,
    GroupKind::FfnIn,
    GroupKind::FfnInBias,
    GroupKind::FfnOut,
    GroupKind::FfnOutBias,
    GroupKind::Norm1Scale,
    GroupKind::Norm1Offset,
    GroupKind::Norm2Scale,
    GroupKind::Norm2Offset,
];

/// One named tensor inside the flat parameter buffer. Vectors have `rows == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Tensor order: token embeddings, position embeddings, then per layer
/// query, key, value, attention output, ffn-in weight and bias, ffn-out
/// weight and bias, norm-1 scale and offset, norm-2 scale and offset, then
/// the span head weight (`model_dim x 2`) and bias.
pub fn layout(config: &ModelConfig) -> Vec<ParamGroup> {
    let d = config.model_dim;
    let f = config.ffn_dim;
    let mut groups = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, kind, layer, rows, cols| {
        groups.push(ParamGroup {
            name,
            kind,
            layer,
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
    };
    push(
        "token_embedding".into(),
        GroupKind::TokenEmbedding,
        None,
        config.vocab_size,
        d,
    );
    push(
        "position_embedding".into(),
        GroupKind::PositionEmbedding,
        None,
        config.max_source_length,
        d,
    );
    for l in 0..config.num_layers {
        for kind in LAYER_KINDS {
            let (name, rows, cols) = match kind {
                GroupKind::Query => ("query", d, d),
                GroupKind::Key => ("key", d, d),
                GroupKind::Value => ("value", d, d),
                GroupKind::AttnOutput => ("attn_output", d, d),
                GroupKind::FfnIn => ("ffn_in", d, f),
                GroupKind::FfnInBias => ("ffn_in_bias", 1, f),
                GroupKind::FfnOut => ("ffn_out", f, d),
                GroupKind::FfnOutBias => ("ffn_out_bias", 1, d),
                GroupKind::Norm1Scale => ("norm1_scale", 1, d),
                GroupKind::Norm1Offset => ("norm1_offset", 1, d),
                GroupKind::Norm2Scale => ("norm2_scale", 1, d),
                GroupKind::Norm2Offset => ("norm2_offset", 1, d),
                _ => unreachable!(),
            };
            push(format!("layer{l}.{name}"), kind, Some(l), rows, cols);
        }
    }
    push("head_weight".into(), GroupKind::HeadWeight, None, d, 2);
    push("head_bias".into(), GroupKind::HeadBias, None, 1, 2);
    groups
}

/// Model parameters as one flat `f64` buffer addressed through named groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    config: ModelConfig,
    groups: Vec<ParamGroup>,
    values: Vec<f64>,
}

impl Params {
    /// Glorot-uniform weights (`r = sqrt(6 / (fan_in + fan_out))`), unit
    /// norm scales, zero offsets and biases. Deterministic in `config.seed`.
    pub fn init(config: &ModelConfig) -> Self {
        let groups = layout(config);
        let total = groups.last().map_or(0, |g| g.offset + g.len());
        let mut values = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for g in &groups {
            let slot = &mut values[g.range()];
            match g.kind {
                GroupKind::Norm1Scale | GroupKind::Norm2Scale => slot.fill(1.0),
                GroupKind::FfnInBias
                | GroupKind::FfnOutBias
                | GroupKind::Norm1Offset
                | GroupKind::Norm2Offset
                | GroupKind::HeadBias => {}
                _ => {
                    let r = (6.0 / (g.rows + g.cols) as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = rng.gen_range(-r..=r);
                    }
                }
            }
        }
        Params {
            config: config.clone(),
            groups,
            values,
        }
    }

    pub(crate) fn from_parts(config: ModelConfig, values: Vec<f64>) -> Option<Self> {
        let groups = layout(&config);
        let total = groups.last().map_or(0, |g| g.offset + g.len());
        (values.len() == total).then_some(Params {
            config,
            groups,
            values,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn group(&self, kind: GroupKind, layer: Option<usize>) -> &ParamGroup {
        group_index(&self.groups, kind, layer)
    }

    pub fn matrix(&self, kind: GroupKind, layer: Option<usize>) -> ArrayView2<'_, f64> {
        let g = self.group(kind, layer);
        ArrayView2::from_shape((g.rows, g.cols), &self.values[g.range()]).expect("layout shape")
    }

    pub fn vector(&self, kind: GroupKind, layer: Option<usize>) -> ArrayView1<'_, f64> {
        let g = self.group(kind, layer);
        ArrayView1::from(&self.values[g.range()])
    }

    pub fn matrix_mut(&mut self, kind: GroupKind, layer: Option<usize>) -> ArrayViewMut2<'_, f64> {
        let g = group_index(&self.groups, kind, layer).clone();
        ArrayViewMut2::from_shape((g.rows, g.cols), &mut self.values[g.range()])
            .expect("layout shape")
    }

    pub fn vector_mut(&mut self, kind: GroupKind, layer: Option<usize>) -> ArrayViewMut1<'_, f64> {
        let g = group_index(&self.groups, kind, layer).clone();
        ArrayViewMut1::from(&mut self.values[g.range()])
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn group_index(groups: &[ParamGroup], kind: GroupKind, layer: Option<usize>) -> &ParamGroup {
    groups
        .iter()
        .find(|g| g.kind == kind && g.layer == layer)
        .unwrap_or_else(|| panic!("no parameter group {kind:?} for layer {layer:?}"))
}

/// Gradient buffer with the same layout as [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    groups: Vec<ParamGroup>,
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Gradients {
            groups: params.groups.clone(),
            values: vec![0.0; params.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn matrix_mut(&mut self, kind: GroupKind, layer: Option<usize>) -> ArrayViewMut2<'_, f64> {
        let g = group_index(&self.groups, kind, layer).clone();
        ArrayViewMut2::from_shape((g.rows, g.cols), &mut self.values[g.range()])
            .expect("layout shape")
    }

    pub fn vector_mut(&mut self, kind: GroupKind, layer: Option<usize>) -> ArrayViewMut1<'_, f64> {
        let g = group_index(&self.groups, kind, layer).clone();
        ArrayViewMut1::from(&mut self.values[g.range()])
    }

    pub(crate) fn range_of(&self, kind: GroupKind, layer: Option<usize>) -> std::ops::Range<usize> {
        group_index(&self.groups, kind, layer).range()
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
