//! Bidirectional multi-head cross-attention between the two encoded
//! streams, layer normalization, global pooling, and the fused
//! representation.

use crate::autodiff::{Graph, PoolKind, ValueId};
use crate::error::{Error, Result};
use crate::mat::{xavier, Mat, Scalar};
use rand::Rng;

/// Weights of one cross-attention direction (queries from one modality,
/// keys and values from the other).
#[derive(Clone, Debug)]
pub struct CrossAttnParams<F> {
    pub w_q: Mat<F>,
    pub w_k: Mat<F>,
    pub w_v: Mat<F>,
    pub w_o: Mat<F>,
    pub ln_gain: Mat<F>,
    pub ln_bias: Mat<F>,
}

impl<F: Scalar> CrossAttnParams<F> {
    pub fn init(model_dim: usize, rng: &mut impl Rng) -> Self {
        let mut ln_gain = Mat::zeros(1, model_dim);
        ln_gain.data.iter_mut().for_each(|v| *v = F::one());
        CrossAttnParams {
            w_q: xavier(model_dim, model_dim, rng),
            w_k: xavier(model_dim, model_dim, rng),
            w_v: xavier(model_dim, model_dim, rng),
            w_o: xavier(model_dim, model_dim, rng),
            ln_gain,
            ln_bias: Mat::zeros(1, model_dim),
        }
    }
}

/// Fusion weights: the two attention directions (absent under the
/// cross-attention ablation or when a stream is dropped) and the dense
/// layer mapping pooled features to the fused vector.
#[derive(Clone, Debug)]
pub struct FusionParams<F> {
    /// EEG queries EMG.
    pub eeg_attn: Option<CrossAttnParams<F>>,
    /// EMG queries EEG.
    pub emg_attn: Option<CrossAttnParams<F>>,
    pub fuse_w: Mat<F>,
    pub fuse_b: Mat<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttnIds {
    pub w_q: ValueId,
    pub w_k: ValueId,
    pub w_v: ValueId,
    pub w_o: ValueId,
    pub ln_gain: ValueId,
    pub ln_bias: ValueId,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionIds {
    pub eeg_attn: Option<CrossAttnIds>,
    pub emg_attn: Option<CrossAttnIds>,
    pub fuse_w: ValueId,
    pub fuse_b: ValueId,
}

pub fn leaf_cross_attn<F: Scalar>(g: &mut Graph<F>, p: &CrossAttnParams<F>) -> CrossAttnIds {
    CrossAttnIds {
        w_q: g.leaf(&p.w_q, true),
        w_k: g.leaf(&p.w_k, true),
        w_v: g.leaf(&p.w_v, true),
        w_o: g.leaf(&p.w_o, true),
        ln_gain: g.leaf(&p.ln_gain, true),
        ln_bias: g.leaf(&p.ln_bias, true),
    }
}

pub fn leaf_fusion<F: Scalar>(g: &mut Graph<F>, p: &FusionParams<F>) -> FusionIds {
    FusionIds {
        eeg_attn: p.eeg_attn.as_ref().map(|a| leaf_cross_attn(g, a)),
        emg_attn: p.emg_attn.as_ref().map(|a| leaf_cross_attn(g, a)),
        fuse_w: g.leaf(&p.fuse_w, true),
        fuse_b: g.leaf(&p.fuse_b, true),
    }
}

/// Multi-head cross-attention: queries from `z_q`, keys and values from
/// `z_kv`, scaled by `1/sqrt(head_dim)`, heads concatenated, output
/// projected and layer-normalized.
pub fn cross_attention<F: Scalar>(
    g: &mut Graph<F>,
    ids: &CrossAttnIds,
    z_q: ValueId,
    z_kv: ValueId,
    heads: usize,
    head_dim: usize,
) -> Result<ValueId> {
    let (tq, dq) = g.shape(z_q);
    let (tkv, dkv) = g.shape(z_kv);
    if tq != tkv {
        return Err(Error::Shape {
            op: "cross_attention",
            lhs: (tq, dq),
            rhs: (tkv, dkv),
        });
    }
    if heads * head_dim != dq {
        return Err(Error::invalid(format!(
            "{heads} heads x {head_dim} dims do not cover model width {dq}"
        )));
    }
    let q = g.linear(z_q, ids.w_q, None)?;
    let k = g.linear(z_kv, ids.w_k, None)?;
    let v = g.linear(z_kv, ids.w_v, None)?;
    let scale = F::c(1.0 / (head_dim as f64).sqrt());
    let mut concat: Option<ValueId> = None;
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, scale);
        let attn = g.softmax(scaled);
        let ch = g.matmul(attn, vh)?;
        concat = Some(match concat {
            Some(prev) => g.concat_cols(prev, ch)?,
            None => ch,
        });
    }
    let merged = concat.expect("at least one head");
    let projected = g.linear(merged, ids.w_o, None)?;
    g.layer_norm(projected, ids.ln_gain, ids.ln_bias)
}

/// Fuse the attended streams: elementwise sum, global average and max
/// pooling over time, concatenation, and a ReLU dense layer down to the
/// fused width. Either stream may be absent (single-fusion ablations).
pub fn fuse<F: Scalar>(
    g: &mut Graph<F>,
    ids: &FusionIds,
    c_eeg: Option<ValueId>,
    c_emg: Option<ValueId>,
) -> Result<ValueId> {
    let s = match (c_eeg, c_emg) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::invalid("fuse needs at least one stream")),
    };
    let p_avg = g.global_pool(s, PoolKind::Avg)?;
    let p_max = g.global_pool(s, PoolKind::Max)?;
    let p = g.concat_cols(p_avg, p_max)?;
    let f = g.linear(p, ids.fuse_w, Some(ids.fuse_b))?;
    Ok(g.relu(f))
}
