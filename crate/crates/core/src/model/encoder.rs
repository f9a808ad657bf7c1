//! Forward and backward passes of the span encoder for one sequence.
//!
//! Only unmasked positions are gathered into the working matrices: with
//! attention restricted to real tokens, a padded row can never influence a
//! real one, so dropping it leaves real-position outputs bit-for-bit
//! unchanged while skipping the wasted work.

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{GroupKind, Gradients, Params};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverted dropout driven by a caller-seeded generator.
pub(crate) struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let rng = &mut self.rng;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }
}

struct NormTrace {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerTrace {
    input: Array2<f64>,
    query: Array2<f64>,
    key: Array2<f64>,
    value: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    norm1: NormTrace,
    hidden: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    norm2: NormTrace,
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Trace {
    pub positions: Vec<usize>,
    ids: Vec<u32>,
    embed_drop: Option<Array2<f64>>,
    layers: Vec<LayerTrace>,
    output: Array2<f64>,
}

fn layer_norm(
    x: &Array2<f64>,
    scale: ndarray::ArrayView1<f64>,
    offset: ndarray::ArrayView1<f64>,
) -> (Array2<f64>, NormTrace) {
    let d = x.ncols() as f64;
    let mut normalized = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in normalized.outer_iter_mut().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let out = &normalized * &scale + offset;
    (
        out,
        NormTrace {
            normalized,
            inv_std,
        },
    )
}

/// Returns the gradient with respect to the norm input and accumulates the
/// scale/offset gradients.
fn layer_norm_backward(
    d_out: &Array2<f64>,
    trace: &NormTrace,
    scale: ndarray::ArrayView1<f64>,
    d_scale: &mut ndarray::ArrayViewMut1<f64>,
    d_offset: &mut ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    let d = d_out.ncols() as f64;
    *d_scale += &(d_out * &trace.normalized).sum_axis(Axis(0));
    *d_offset += &d_out.sum_axis(Axis(0));
    let d_norm = d_out * &scale;
    let mut d_in = Array2::zeros(d_out.raw_dim());
    for (((mut out, dn), xh), &inv) in d_in
        .outer_iter_mut()
        .zip(d_norm.outer_iter())
        .zip(trace.normalized.outer_iter())
        .zip(trace.inv_std.iter())
    {
        let mean_dn = dn.sum() / d;
        let mean_dn_xh = dn.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&dn)
            .and(&xh)
            .for_each(|o, &g, &h| *o = inv * (g - mean_dn - h * mean_dn_xh));
    }
    d_in
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn apply_mask(m: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(mask) = mask {
        *m *= mask;
    }
}

/// Runs the encoder over the unmasked positions and returns per-position
/// `(start, end)` logits (`n x 2`) plus the trace for backprop.
pub(crate) fn forward_trace(
    params: &Params,
    ids: &[u32],
    mask: &[u8],
    mut dropout: Option<&mut Dropout>,
) -> (Array2<f64>, Trace) {
    let cfg = params.config();
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let positions: Vec<usize> = (0..ids.len()).filter(|&k| mask[k] == 1).collect();
    let real_ids: Vec<u32> = positions.iter().map(|&k| ids[k]).collect();
    let n = positions.len();

    let tok = params.matrix(GroupKind::TokenEmbedding, None);
    let pos = params.matrix(GroupKind::PositionEmbedding, None);
    let mut x = Array2::zeros((n, d));
    for (i, (&k, &id)) in positions.iter().zip(&real_ids).enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&tok.row(id as usize));
        row += &pos.row(k);
    }
    let embed_drop = dropout.as_deref_mut().and_then(|dr| dr.mask(n, d));
    apply_mask(&mut x, &embed_drop);

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let layer = Some(l);
        let query = x.dot(&params.matrix(GroupKind::Query, layer));
        let key = x.dot(&params.matrix(GroupKind::Key, layer));
        let value = x.dot(&params.matrix(GroupKind::Value, layer));
        let mut context = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut scores = query.slice(cols).dot(&key.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            context.slice_mut(cols).assign(&scores.dot(&value.slice(cols)));
            probs.push(scores);
        }
        let mut attn = context.dot(&params.matrix(GroupKind::AttnOutput, layer));
        let attn_drop = dropout.as_deref_mut().and_then(|dr| dr.mask(n, d));
        apply_mask(&mut attn, &attn_drop);
        let (hidden, norm1) = layer_norm(
            &(&x + &attn),
            params.vector(GroupKind::Norm1Scale, layer),
            params.vector(GroupKind::Norm1Offset, layer),
        );

        let pre_act = hidden.dot(&params.matrix(GroupKind::FfnIn, layer))
            + params.vector(GroupKind::FfnInBias, layer);
        let act = pre_act.mapv(gelu);
        let mut ffn = act.dot(&params.matrix(GroupKind::FfnOut, layer))
            + params.vector(GroupKind::FfnOutBias, layer);
        let ffn_drop = dropout.as_deref_mut().and_then(|dr| dr.mask(n, d));
        apply_mask(&mut ffn, &ffn_drop);
        let (out, norm2) = layer_norm(
            &(&hidden + &ffn),
            params.vector(GroupKind::Norm2Scale, layer),
            params.vector(GroupKind::Norm2Offset, layer),
        );

        layers.push(LayerTrace {
            input: std::mem::replace(&mut x, out),
            query,
            key,
            value,
            probs,
            context,
            attn_drop,
            norm1,
            hidden,
            pre_act,
            act,
            ffn_drop,
            norm2,
        });
    }

    let logits = x.dot(&params.matrix(GroupKind::HeadWeight, None))
        + params.vector(GroupKind::HeadBias, None);
    (
        logits,
        Trace {
            positions,
            ids: real_ids,
            embed_drop,
            layers,
            output: x,
        },
    )
}

fn add_outer(target: &mut ndarray::ArrayViewMut2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    // target += a^T b
    *target += &a.t().dot(b);
}

/// Backpropagates `d_logits` (`n x 2`, rows aligned with `trace.positions`)
/// and adds the parameter gradients into `grads`.
pub(crate) fn backward(params: &Params, trace: &Trace, d_logits: &Array2<f64>, grads: &mut Gradients) {
    let cfg = params.config();
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let head_dim = d / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    add_outer(
        &mut grads.matrix_mut(GroupKind::HeadWeight, None),
        &trace.output,
        d_logits,
    );
    grads
        .vector_mut(GroupKind::HeadBias, None)
        .scaled_add(1.0, &d_logits.sum_axis(Axis(0)));
    let mut dx = d_logits.dot(&params.matrix(GroupKind::HeadWeight, None).t());

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let layer = Some(l);
        let d_res2 = {
            let (mut gs, mut go) = split_norm_grads(grads, GroupKind::Norm2Scale, GroupKind::Norm2Offset, layer);
            layer_norm_backward(
                &dx,
                &lt.norm2,
                params.vector(GroupKind::Norm2Scale, layer),
                &mut gs,
                &mut go,
            )
        };

        // feed-forward branch
        let mut d_ffn = d_res2.clone();
        apply_mask(&mut d_ffn, &lt.ffn_drop);
        grads
            .vector_mut(GroupKind::FfnOutBias, layer)
            .scaled_add(1.0, &d_ffn.sum_axis(Axis(0)));
        add_outer(&mut grads.matrix_mut(GroupKind::FfnOut, layer), &lt.act, &d_ffn);
        let d_act = d_ffn.dot(&params.matrix(GroupKind::FfnOut, layer).t());
        let mut d_pre = d_act;
        Zip::from(&mut d_pre)
            .and(&lt.pre_act)
            .for_each(|g, &z| *g *= gelu_grad(z));
        grads
            .vector_mut(GroupKind::FfnInBias, layer)
            .scaled_add(1.0, &d_pre.sum_axis(Axis(0)));
        add_outer(&mut grads.matrix_mut(GroupKind::FfnIn, layer), &lt.hidden, &d_pre);
        let d_hidden = d_res2 + d_pre.dot(&params.matrix(GroupKind::FfnIn, layer).t());

        let d_res1 = {
            let (mut gs, mut go) = split_norm_grads(grads, GroupKind::Norm1Scale, GroupKind::Norm1Offset, layer);
            layer_norm_backward(
                &d_hidden,
                &lt.norm1,
                params.vector(GroupKind::Norm1Scale, layer),
                &mut gs,
                &mut go,
            )
        };

        // attention branch
        let mut d_attn = d_res1.clone();
        apply_mask(&mut d_attn, &lt.attn_drop);
        add_outer(
            &mut grads.matrix_mut(GroupKind::AttnOutput, layer),
            &lt.context,
            &d_attn,
        );
        let d_context = d_attn.dot(&params.matrix(GroupKind::AttnOutput, layer).t());
        let n = d_context.nrows();
        let mut d_query = Array2::zeros((n, d));
        let mut d_key = Array2::zeros((n, d));
        let mut d_value = Array2::zeros((n, d));
        for (h, p) in lt.probs.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let dc = d_context.slice(cols);
            let d_probs = dc.dot(&lt.value.slice(cols).t());
            d_value.slice_mut(cols).assign(&p.t().dot(&dc));
            let mut d_scores = d_probs;
            for (mut ds, pr) in d_scores.outer_iter_mut().zip(p.outer_iter()) {
                let dot = ds.dot(&pr);
                Zip::from(&mut ds).and(&pr).for_each(|g, &q| *g = q * (*g - dot));
            }
            d_scores *= scale;
            d_query
                .slice_mut(cols)
                .assign(&d_scores.dot(&lt.key.slice(cols)));
            d_key
                .slice_mut(cols)
                .assign(&d_scores.t().dot(&lt.query.slice(cols)));
        }
        let mut d_input = d_res1;
        for (kind, dm) in [
            (GroupKind::Query, &d_query),
            (GroupKind::Key, &d_key),
            (GroupKind::Value, &d_value),
        ] {
            add_outer(&mut grads.matrix_mut(kind, layer), &lt.input, dm);
            d_input += &dm.dot(&params.matrix(kind, layer).t());
        }
        dx = d_input;
    }

    apply_mask(&mut dx, &trace.embed_drop);
    {
        let mut d_tok = grads.matrix_mut(GroupKind::TokenEmbedding, None);
        for (row, &id) in dx.outer_iter().zip(&trace.ids) {
            let mut target = d_tok.row_mut(id as usize);
            target += &row;
        }
    }
    let mut d_pos = grads.matrix_mut(GroupKind::PositionEmbedding, None);
    for (row, &k) in dx.outer_iter().zip(&trace.positions) {
        let mut target = d_pos.row_mut(k);
        target += &row;
    }
}

/// Disjoint mutable views of a norm's scale and offset gradients.
fn split_norm_grads(
    grads: &mut Gradients,
    scale: GroupKind,
    offset: GroupKind,
    layer: Option<usize>,
) -> (ndarray::ArrayViewMut1<'_, f64>, ndarray::ArrayViewMut1<'_, f64>) {
    let rs = grads.range_of(scale, layer);
    let ro = grads.range_of(offset, layer);
    debug_assert!(rs.end <= ro.start);
    let (head, tail) = grads.values_mut().split_at_mut(ro.start);
    (
        ndarray::ArrayViewMut1::from(&mut head[rs]),
        ndarray::ArrayViewMut1::from(&mut tail[..ro.end - ro.start]),
    )
}
