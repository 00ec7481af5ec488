//! Slot attention over an encoded character sequence.
//!
//! K slot vectors act as queries over the input positions; the attention map
//! is normalized over the *slot* axis so slots compete for each position, and
//! slot updates are the per-slot renormalized weighted mean of the input
//! values. Slots then pass through a GRU step and a residual MLP.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::{gru_cell, DiffError, Graph, GruParams, NodeId, Result, Scalar, Tensor};
use crate::posenc;

/// How the K initial slots are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotInitMode {
    /// One learnable mean and (log-)std shared by all slots.
    Shared,
    /// A separate learnable mean per slot; std fixed to a constant.
    PerSlotMu,
    /// Shared learnable mean plus the positional encoding of each slot's
    /// anchor position; shared learnable std.
    Positional,
}

impl SlotInitMode {
    pub fn parse(s: &str) -> Option<SlotInitMode> {
        match s {
            "shared" => Some(SlotInitMode::Shared),
            "per_slot_mu" => Some(SlotInitMode::PerSlotMu),
            "positional" => Some(SlotInitMode::Positional),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SlotInitMode::Shared => "shared",
            SlotInitMode::PerSlotMu => "per_slot_mu",
            SlotInitMode::Positional => "positional",
        }
    }
}

/// Initialization parameters. `mu` is 1 x D (shared / positional) or K x D
/// (per-slot); `log_sigma` is present exactly when the std is learnable.
#[derive(Debug, Clone)]
pub struct SlotInitParams<T> {
    pub mu: T,
    pub log_sigma: Option<T>,
}

impl<T: Copy> SlotInitParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> SlotInitParams<U> {
        SlotInitParams { mu: f(self.mu), log_sigma: self.log_sigma.map(&mut f) }
    }
}

#[derive(Debug, Clone)]
pub struct SlotInitSpec {
    pub mode: SlotInitMode,
    pub k: usize,
    pub d_slots: usize,
    /// Fixed std for `PerSlotMu`.
    pub sigma_const: f64,
    /// Input length over which slots are spread in `Positional` mode.
    pub max_len: usize,
}

/// Draw initial slots (K x D) with reparameterized noise so gradients reach
/// the learnable mean/std.
pub fn init_slots<S: Scalar>(
    g: &mut Graph<S>,
    p: &SlotInitParams<NodeId>,
    spec: &SlotInitSpec,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let (k, d) = (spec.k, spec.d_slots);
    let noise = {
        let mut t = Tensor::<S>::zeros(&[k, d]);
        for v in t.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = S::of_f64(z);
        }
        t
    };
    let eps = g.constant(&noise)?;
    match spec.mode {
        SlotInitMode::Shared => {
            let mu = expect_shape(g, p.mu, 1, d, "shared mu")?;
            let ls = p.log_sigma.ok_or(DiffError::Domain {
                op: "init_slots",
                detail: "shared mode needs a learnable log_sigma".into(),
            })?;
            let sigma = g.exp(ls)?;
            let sigma_b = g.broadcast(sigma, 0, k)?;
            let scaled = g.mul(sigma_b, eps)?;
            let mu_b = g.broadcast(mu, 0, k)?;
            g.add(mu_b, scaled)
        }
        SlotInitMode::PerSlotMu => {
            let mu = expect_shape(g, p.mu, k, d, "per-slot mu")?;
            let scaled = g.scale(eps, spec.sigma_const)?;
            g.add(mu, scaled)
        }
        SlotInitMode::Positional => {
            let mu = expect_shape(g, p.mu, 1, d, "shared mu")?;
            let ls = p.log_sigma.ok_or(DiffError::Domain {
                op: "init_slots",
                detail: "positional mode needs a learnable log_sigma".into(),
            })?;
            let pe = posenc::slot_position_table(k, spec.max_len, d).cast::<S>();
            let pe = g.constant(&pe)?;
            let sigma = g.exp(ls)?;
            let sigma_b = g.broadcast(sigma, 0, k)?;
            let scaled = g.mul(sigma_b, eps)?;
            let mu_b = g.broadcast(mu, 0, k)?;
            let centered = g.add(mu_b, pe)?;
            g.add(centered, scaled)
        }
    }
}

fn expect_shape<S: Scalar>(
    g: &Graph<S>,
    id: NodeId,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<NodeId> {
    let (r, c) = g.shape(id);
    if (r, c) != (rows, cols) {
        return Err(DiffError::Shape {
            op: "init_slots",
            detail: format!("{} is {}x{}, expected {}x{}", what, r, c, rows, cols),
        });
    }
    Ok(id)
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<T> {
    pub gamma: T,
    pub beta: T,
}

impl<T: Copy> LayerNormParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LayerNormParams<U> {
        LayerNormParams { gamma: f(self.gamma), beta: f(self.beta) }
    }
}

/// Two-layer residual MLP weights (D -> D, ReLU between).
#[derive(Debug, Clone)]
pub struct MlpParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T: Copy> MlpParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> MlpParams<U> {
        MlpParams { w1: f(self.w1), b1: f(self.b1), w2: f(self.w2), b2: f(self.b2) }
    }
}

/// Slot attention weights: projections into the common dimension D, the GRU
/// state update, the residual MLP and the three layer norms.
#[derive(Debug, Clone)]
pub struct SlotAttnParams<T> {
    pub ln_inputs: LayerNormParams<T>,
    pub ln_slots: LayerNormParams<T>,
    pub ln_mlp: LayerNormParams<T>,
    /// D_slots -> D (queries from slots).
    pub proj_q: T,
    /// D_input -> D (keys from inputs).
    pub proj_k: T,
    /// D_input -> D (values from inputs).
    pub proj_v: T,
    pub gru: GruParams<T>,
    pub mlp: MlpParams<T>,
}

impl<T: Copy> SlotAttnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> SlotAttnParams<U> {
        SlotAttnParams {
            ln_inputs: self.ln_inputs.map(&mut f),
            ln_slots: self.ln_slots.map(&mut f),
            ln_mlp: self.ln_mlp.map(&mut f),
            proj_q: f(self.proj_q),
            proj_k: f(self.proj_k),
            proj_v: f(self.proj_v),
            gru: self.gru.map(&mut f),
            mlp: self.mlp.map(&mut f),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SlotAttnCfg {
    /// Iteration count T.
    pub iters: usize,
    /// Stability constant added to attention weights before the per-slot
    /// renormalization.
    pub delta: f64,
}

#[derive(Debug)]
pub struct SlotAttnOut {
    /// Final slots, K x D_slots.
    pub slots: NodeId,
    /// Final attention map, K x N (rows = slots, cols = input positions).
    pub attn: NodeId,
}

/// Per-slot renormalized weighted mean: weights (N x K) are zeroed on masked
/// rows, each column is normalized over the valid rows, and the updates are
/// `weights^T . values` (K x D).
pub fn weighted_mean<S: Scalar>(
    g: &mut Graph<S>,
    attn: NodeId,
    values: NodeId,
    mask: Option<&[bool]>,
    delta: f64,
) -> Result<NodeId> {
    let (n, _k) = g.shape(attn);
    let mut w = g.add_scalar(attn, delta)?;
    if let Some(mask) = mask {
        if mask.len() != n {
            return Err(DiffError::Shape {
                op: "weighted_mean",
                detail: format!("mask has {} entries for {} rows", mask.len(), n),
            });
        }
        if mask.iter().all(|&m| !m) {
            return Err(DiffError::Empty("weighted_mean: all positions masked"));
        }
        if mask.iter().any(|&m| !m) {
            let mcol = Tensor::col(
                mask.iter()
                    .map(|&m| if m { S::one() } else { S::zero() })
                    .collect(),
            );
            let mcol = g.constant(&mcol)?;
            let (_, k) = g.shape(attn);
            let mfull = g.broadcast(mcol, 1, k)?;
            w = g.mul(w, mfull)?;
        }
    }
    let colsum = g.sum(w, Some(0))?;
    let denom = g.broadcast(colsum, 0, n)?;
    let wn = g.div(w, denom)?;
    let wt = g.transpose(wn)?;
    g.matmul(wt, values)
}

/// Run the iterative attention update and return final slots plus the final
/// attention map.
pub fn slot_attention<S: Scalar>(
    g: &mut Graph<S>,
    inputs: NodeId,
    mask: Option<&[bool]>,
    init: NodeId,
    p: &SlotAttnParams<NodeId>,
    cfg: &SlotAttnCfg,
) -> Result<SlotAttnOut> {
    let (n, _d_in) = g.shape(inputs);
    if n == 0 {
        return Err(DiffError::Empty("slot_attention: no input positions"));
    }
    if let Some(m) = mask {
        if m.iter().all(|&v| !v) {
            return Err(DiffError::Empty("slot_attention: all positions masked"));
        }
    }
    if cfg.iters == 0 {
        return Err(DiffError::Domain {
            op: "slot_attention",
            detail: "iteration count must be at least 1".into(),
        });
    }
    let (_, d) = g.shape(p.proj_k);
    let scale = 1.0 / (d as f64).sqrt();

    let x = g.layer_norm(inputs, p.ln_inputs.gamma, p.ln_inputs.beta, 1e-5)?;
    let keys = g.matmul(x, p.proj_k)?;
    let values = g.matmul(x, p.proj_v)?;

    let mut slots = init;
    let mut attn = None;
    for _ in 0..cfg.iters {
        let prev = slots;
        let normed = g.layer_norm(slots, p.ln_slots.gamma, p.ln_slots.beta, 1e-5)?;
        let queries = g.matmul(normed, p.proj_q)?;
        let qt = g.transpose(queries)?;
        let logits = g.matmul(keys, qt)?;
        let logits = g.scale(logits, scale)?;
        // softmax over the slot axis: slots compete for each position
        let a = g.softmax(logits, 1)?;
        attn = Some(a);
        let updates = weighted_mean(g, a, values, mask, cfg.delta)?;
        slots = gru_cell(g, prev, updates, &p.gru)?;
        let res_in = g.layer_norm(slots, p.ln_mlp.gamma, p.ln_mlp.beta, 1e-5)?;
        let h = g.matmul(res_in, p.mlp.w1)?;
        let h = g.add_bias(h, p.mlp.b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, p.mlp.w2)?;
        let h = g.add_bias(h, p.mlp.b2)?;
        slots = g.add(slots, h)?;
    }
    let attn = attn.expect("at least one iteration ran");
    let attn_t = g.transpose(attn)?;
    Ok(SlotAttnOut { slots, attn: attn_t })
}
