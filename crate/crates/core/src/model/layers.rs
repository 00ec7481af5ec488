//! Transformer building blocks: projections, multi-head attention, and the
//! encoder/decoder layers (post-norm, as in the original architecture).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Graph, NodeId, Result, Scalar, Tensor};
use crate::slotattn::{LayerNormParams, MlpParams};

const MASK_NEG: f64 = -1e30;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    pub w: T,
    pub b: T,
}

impl<T: Copy> LinearParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LinearParams<U> {
        LinearParams { w: f(self.w), b: f(self.b) }
    }
}

/// Query/key/value/output projections of one attention block. For cross
/// attention the key/value weights map from the memory width instead of the
/// model width.
#[derive(Debug, Clone)]
pub struct AttnParams<T> {
    pub q: LinearParams<T>,
    pub k: LinearParams<T>,
    pub v: LinearParams<T>,
    pub o: LinearParams<T>,
}

impl<T: Copy> AttnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> AttnParams<U> {
        AttnParams {
            q: self.q.map(&mut f),
            k: self.k.map(&mut f),
            v: self.v.map(&mut f),
            o: self.o.map(&mut f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncLayerParams<T> {
    pub attn: AttnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub ffn: MlpParams<T>,
    pub ln2: LayerNormParams<T>,
}

impl<T: Copy> EncLayerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> EncLayerParams<U> {
        EncLayerParams {
            attn: self.attn.map(&mut f),
            ln1: self.ln1.map(&mut f),
            ffn: self.ffn.map(&mut f),
            ln2: self.ln2.map(&mut f),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecLayerParams<T> {
    pub self_attn: AttnParams<T>,
    pub ln1: LayerNormParams<T>,
    pub cross: AttnParams<T>,
    pub ln2: LayerNormParams<T>,
    pub ffn: MlpParams<T>,
    pub ln3: LayerNormParams<T>,
}

impl<T: Copy> DecLayerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> DecLayerParams<U> {
        DecLayerParams {
            self_attn: self.self_attn.map(&mut f),
            ln1: self.ln1.map(&mut f),
            cross: self.cross.map(&mut f),
            ln2: self.ln2.map(&mut f),
            ffn: self.ffn.map(&mut f),
            ln3: self.ln3.map(&mut f),
        }
    }
}

pub fn linear<S: Scalar>(g: &mut Graph<S>, x: NodeId, p: &LinearParams<NodeId>) -> Result<NodeId> {
    let y = g.matmul(x, p.w)?;
    g.add_bias(y, p.b)
}

/// Inverted dropout; identity when `p` is 0 or no RNG is supplied (eval).
pub fn dropout<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    p: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let rng = match rng {
        Some(r) if p > 0.0 => r,
        _ => return Ok(x),
    };
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::<S>::zeros(&[r, c]);
    for v in mask.data_mut() {
        let u: f64 = rng.gen();
        *v = if u < p { S::zero() } else { S::of_f64(keep) };
    }
    let m = g.constant(&mask)?;
    g.mul(x, m)
}

/// Additive causal mask (0 on and below the diagonal, a large negative above).
pub fn causal_mask<S: Scalar>(g: &mut Graph<S>, n: usize) -> Result<NodeId> {
    let mut t = Tensor::<S>::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            t.data_mut()[i * n + j] = S::of_f64(MASK_NEG);
        }
    }
    g.constant(&t)
}

/// Scaled dot-product attention with `heads` heads. Queries come from
/// `q_src`, keys/values from `kv_src`; rows of each head's attention matrix
/// are normalized over the keys. Returns the projected output and, for a
/// single head, the attention matrix node.
pub fn attention<S: Scalar>(
    g: &mut Graph<S>,
    p: &AttnParams<NodeId>,
    q_src: NodeId,
    kv_src: NodeId,
    heads: usize,
    additive_mask: Option<NodeId>,
) -> Result<(NodeId, Option<NodeId>)> {
    let q = linear(g, q_src, &p.q)?;
    let k = linear(g, kv_src, &p.k)?;
    let v = linear(g, kv_src, &p.v)?;
    let (_, d) = g.shape(q);
    if heads == 0 || d % heads != 0 {
        return Err(DiffError::Shape {
            op: "attention",
            detail: format!("{} heads do not divide width {}", heads, d),
        });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut single = None;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let mut logits = g.scale(logits, scale)?;
        if let Some(m) = additive_mask {
            logits = g.add(logits, m)?;
        }
        let a = g.softmax(logits, 1)?;
        if heads == 1 {
            single = Some(a);
        }
        outs.push(g.matmul(a, vh)?);
    }
    let merged = if outs.len() == 1 { outs[0] } else { g.concat(1, &outs)? };
    let out = linear(g, merged, &p.o)?;
    Ok((out, single))
}

fn feed_forward<S: Scalar>(g: &mut Graph<S>, x: NodeId, p: &MlpParams<NodeId>) -> Result<NodeId> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_bias(h, p.b1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, p.w2)?;
    g.add_bias(h, p.b2)
}

/// Post-norm encoder layer: x = LN(x + Drop(SelfAttn(x))); x = LN(x + Drop(FF(x))).
pub fn encoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    p: &EncLayerParams<NodeId>,
    heads: usize,
    dropout_p: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let (attn_out, _) = attention(g, &p.attn, x, x, heads, None)?;
    let attn_out = dropout(g, attn_out, dropout_p, rng.as_deref_mut())?;
    let x = g.add(x, attn_out)?;
    let x = g.layer_norm(x, p.ln1.gamma, p.ln1.beta, LN_EPS)?;
    let ff = feed_forward(g, x, &p.ffn)?;
    let ff = dropout(g, ff, dropout_p, rng.as_deref_mut())?;
    let x = g.add(x, ff)?;
    g.layer_norm(x, p.ln2.gamma, p.ln2.beta, LN_EPS)
}

/// Post-norm decoder layer with causal self-attention and one cross-attention
/// block over `memory` (the slot set). Returns the output and the
/// cross-attention map ((N rows) x (K memory positions)).
pub fn decoder_layer<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    memory: NodeId,
    p: &DecLayerParams<NodeId>,
    self_heads: usize,
    cross_heads: usize,
    dropout_p: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, NodeId)> {
    let (n, _) = g.shape(x);
    let mask = causal_mask(g, n)?;
    let (self_out, _) = attention(g, &p.self_attn, x, x, self_heads, Some(mask))?;
    let self_out = dropout(g, self_out, dropout_p, rng.as_deref_mut())?;
    let x = g.add(x, self_out)?;
    let x = g.layer_norm(x, p.ln1.gamma, p.ln1.beta, LN_EPS)?;

    let (cross_out, cross_attn) = attention(g, &p.cross, x, memory, cross_heads, None)?;
    let cross_attn = cross_attn.ok_or(DiffError::Shape {
        op: "decoder_layer",
        detail: format!("cross attention must use a single head, got {}", cross_heads),
    })?;
    let cross_out = dropout(g, cross_out, dropout_p, rng.as_deref_mut())?;
    let x = g.add(x, cross_out)?;
    let x = g.layer_norm(x, p.ln2.gamma, p.ln2.beta, LN_EPS)?;

    let ff = feed_forward(g, x, &p.ffn)?;
    let ff = dropout(g, ff, dropout_p, rng.as_deref_mut())?;
    let x = g.add(x, ff)?;
    let out = g.layer_norm(x, p.ln3.gamma, p.ln3.beta, LN_EPS)?;
    Ok((out, cross_attn))
}
