//! Bidirectional transformer encoder (post-layer-norm ordering).

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Handles to the parameters of one encoder block. Projection weights are
/// `[out, in]`; `q`, `k`, `v` project `d → heads·head_dim`, `o` projects back.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub o_w: Var,
    pub o_b: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

/// Unmasked scaled dot-product attention over `x[L, d]` followed by the
/// residual/normalization and GELU feed-forward of one encoder block.
pub fn encoder_layer<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    p: &EncoderLayerVars,
    n_heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let (_, d) = g.value(x).dims2()?;
    let inner = g.value(p.q_w).shape()[0];
    if n_heads == 0 || n_heads * head_dim != inner {
        return Err(Error::Dimension(format!(
            "{n_heads} heads of width {head_dim} do not tile projection width {inner}"
        )));
    }
    let q = g.linear(x, p.q_w, p.q_b)?;
    let k = g.linear(x, p.k_w, p.k_b)?;
    let v = g.linear(x, p.v_w, p.v_b)?;
    let scale = F::of(1.0 / (head_dim as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        heads.push(g.matmul(attn, vh)?);
    }
    let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let attn_out = g.linear(ctx, p.o_w, p.o_b)?;
    if g.value(attn_out).shape()[1] != d {
        return Err(Error::Dimension("attention output width differs from input".into()));
    }
    let res1 = g.add(x, attn_out)?;
    let eps = F::of(LAYER_NORM_EPS);
    let h1 = g.layer_norm_rows(res1, p.ln1_g, p.ln1_b, eps)?;
    let ff = g.linear(h1, p.ff1_w, p.ff1_b)?;
    let ff = g.gelu(ff);
    let ff = g.linear(ff, p.ff2_w, p.ff2_b)?;
    let res2 = g.add(h1, ff)?;
    g.layer_norm_rows(res2, p.ln2_g, p.ln2_b, eps)
}

/// Adds learned position embeddings (`positions[max, d]`, first `L` rows) and runs
/// the encoder stack.
pub fn multi_head_self_attention<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    positions: Option<Var>,
    layers: &[EncoderLayerVars],
    n_heads: usize,
    head_dim: usize,
) -> Result<Var> {
    let (len, _) = g.value(x).dims2()?;
    let mut h = x;
    if let Some(pos) = positions {
        let (max, _) = g.value(pos).dims2()?;
        if len > max {
            return Err(Error::SequenceLength { len, max });
        }
        let rows = g.slice_rows(pos, 0, len)?;
        h = g.add(h, rows)?;
    }
    for layer in layers {
        h = encoder_layer(g, h, layer, n_heads, head_dim)?;
    }
    Ok(h)
}
