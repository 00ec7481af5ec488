//! The full autoencoder: embedding + Transformer encoder, slot bottleneck
//! with hard-concrete gates, and a shallow decoder that reconstructs the
//! character sequence while attending over the slots.

pub mod layers;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{CharSequence, BOS_ID, EOS_ID};
use crate::diff::{DiffError, Graph, GruParams, NodeId, Scalar, Tensor};
use crate::gates::{gate_forward, GateCfg, GateMode, GateNodes};
use crate::params::{ParamId, ParamSet};
use crate::posenc;
use crate::seeds;
use crate::slotattn::{
    init_slots, slot_attention, LayerNormParams, MlpParams, SlotAttnCfg, SlotAttnParams,
    SlotInitMode, SlotInitParams, SlotInitSpec,
};
use layers::{
    decoder_layer, dropout, encoder_layer, AttnParams, DecLayerParams, EncLayerParams,
    LinearParams,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("sequence of {len} characters exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Model hyperparameters. `paper_defaults` carries the published training
/// configuration; smaller settings are used by the toy suites.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_self_heads: usize,
    pub dec_cross_heads: usize,
    pub k_slots: usize,
    pub d_slots: usize,
    /// Slot-attention iteration count T.
    pub iters: usize,
    pub max_len: usize,
    pub init_mode: SlotInitMode,
    /// Fixed slot-noise std for the per-slot-mean init.
    pub sigma_const: f64,
    pub gate: GateCfg,
    /// Stability constant in the slot-attention weighted mean.
    pub delta: f64,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn paper_defaults(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: 256,
            enc_layers: 2,
            enc_heads: 4,
            dec_self_heads: 1,
            dec_cross_heads: 1,
            k_slots: 64,
            d_slots: 128,
            iters: 1,
            max_len: 128,
            init_mode: SlotInitMode::PerSlotMu,
            sigma_const: 0.5,
            gate: GateCfg::default(),
            delta: 1e-8,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("enc_heads", self.enc_heads),
            ("dec_self_heads", self.dec_self_heads),
            ("k_slots", self.k_slots),
            ("d_slots", self.d_slots),
            ("iters", self.iters),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.k_slots > self.max_len {
            return Err(ModelError::Config(format!(
                "k_slots {} exceeds max_len {}",
                self.k_slots, self.max_len
            )));
        }
        if self.d_model % self.enc_heads != 0 {
            return Err(ModelError::Config(format!(
                "enc_heads {} does not divide d_model {}",
                self.enc_heads, self.d_model
            )));
        }
        if self.d_model % self.dec_self_heads != 0 {
            return Err(ModelError::Config(format!(
                "dec_self_heads {} does not divide d_model {}",
                self.dec_self_heads, self.d_model
            )));
        }
        if self.dec_cross_heads != 1 {
            return Err(ModelError::Config(
                "the decoder uses a single attention head over the slots".into(),
            ));
        }
        if !(self.dropout >= 0.0 && self.dropout < 1.0) {
            return Err(ModelError::Config(format!("dropout {} out of [0,1)", self.dropout)));
        }
        if self.delta <= 0.0 {
            return Err(ModelError::Config("delta must be positive".into()));
        }
        if self.sigma_const < 0.0 {
            return Err(ModelError::Config("sigma_const must be non-negative".into()));
        }
        self.gate.validate()?;
        if self.vocab_size <= EOS_ID as usize {
            return Err(ModelError::Config("vocab_size must cover the special ids".into()));
        }
        Ok(())
    }

    pub fn ff_inner(&self) -> usize {
        4 * self.d_model
    }

    fn init_spec(&self) -> SlotInitSpec {
        SlotInitSpec {
            mode: self.init_mode,
            k: self.k_slots,
            d_slots: self.d_slots,
            sigma_const: self.sigma_const,
            max_len: self.max_len,
        }
    }
}

/// All model parameters, generic over the handle type (ParamId in the store,
/// NodeId once bound to a graph).
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub embed: T,
    pub enc_layers: Vec<EncLayerParams<T>>,
    pub slot_init: SlotInitParams<T>,
    pub slot_attn: SlotAttnParams<T>,
    pub gate_w: T,
    pub dec: DecLayerParams<T>,
    pub out: LinearParams<T>,
}

impl<T: Copy> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> ModelParams<U> {
        ModelParams {
            embed: f(self.embed),
            enc_layers: self.enc_layers.iter().map(|l| l.map(&mut f)).collect(),
            slot_init: self.slot_init.map(&mut f),
            slot_attn: self.slot_attn.map(&mut f),
            gate_w: f(self.gate_w),
            dec: self.dec.map(&mut f),
            out: self.out.map(&mut f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

impl RunMode {
    fn is_train(self) -> bool {
        self == RunMode::Train
    }
}

/// The autoencoder: configuration plus its parameter store.
pub struct SlotAutoencoder {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub ids: ModelParams<ParamId>,
    /// Base seed; eval-time slot noise derives per-sentence streams from it.
    pub seed: u64,
    pe_table: Tensor<f32>,
}

struct ParamBuilder<'a> {
    set: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let std = (2.0 / (rows + cols) as f64).sqrt();
        let t = Tensor::randn(rows, cols, std, &mut self.rng);
        self.set.add(name, t)
    }

    fn gauss(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = Tensor::randn(rows, cols, std, &mut self.rng);
        self.set.add(name, t)
    }

    fn zeros(&mut self, name: &str, cols: usize) -> ParamId {
        self.set.add(name, Tensor::zeros(&[1, cols]))
    }

    fn ones(&mut self, name: &str, cols: usize) -> ParamId {
        self.set.add(name, Tensor::full(&[1, cols], 1.0))
    }

    fn full(&mut self, name: &str, cols: usize, v: f32) -> ParamId {
        self.set.add(name, Tensor::full(&[1, cols], v))
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> LinearParams<ParamId> {
        LinearParams {
            w: self.xavier(&format!("{prefix}.w"), rows, cols),
            b: self.zeros(&format!("{prefix}.b"), cols),
        }
    }

    fn layer_norm(&mut self, prefix: &str, cols: usize) -> LayerNormParams<ParamId> {
        LayerNormParams {
            gamma: self.ones(&format!("{prefix}.g"), cols),
            beta: self.zeros(&format!("{prefix}.b"), cols),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, d_kv: usize) -> AttnParams<ParamId> {
        AttnParams {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d_kv, d),
            v: self.linear(&format!("{prefix}.v"), d_kv, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, inner: usize) -> MlpParams<ParamId> {
        MlpParams {
            w1: self.xavier(&format!("{prefix}.w1"), d, inner),
            b1: self.zeros(&format!("{prefix}.b1"), inner),
            w2: self.xavier(&format!("{prefix}.w2"), inner, d),
            b2: self.zeros(&format!("{prefix}.b2"), d),
        }
    }

    fn gru(&mut self, prefix: &str, d: usize) -> GruParams<ParamId> {
        GruParams {
            w_reset: self.xavier(&format!("{prefix}.wr"), d, d),
            u_reset: self.xavier(&format!("{prefix}.ur"), d, d),
            b_reset: self.zeros(&format!("{prefix}.br"), d),
            w_update: self.xavier(&format!("{prefix}.wz"), d, d),
            u_update: self.xavier(&format!("{prefix}.uz"), d, d),
            b_update: self.zeros(&format!("{prefix}.bz"), d),
            w_cand: self.xavier(&format!("{prefix}.wn"), d, d),
            u_cand: self.xavier(&format!("{prefix}.un"), d, d),
            b_cand: self.zeros(&format!("{prefix}.bn"), d),
        }
    }
}

impl SlotAutoencoder {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<SlotAutoencoder, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let rng = seeds::stream(seed, seeds::TAG_PARAM_INIT, 0);
        let mut b = ParamBuilder { set: &mut params, rng };

        let d = cfg.d_model;
        let ds = cfg.d_slots;
        let embed = b.gauss("embed", cfg.vocab_size, d, 1.0 / (d as f64).sqrt());
        let enc_layers = (0..cfg.enc_layers)
            .map(|l| EncLayerParams {
                attn: b.attn(&format!("enc{l}.self"), d, d),
                ln1: b.layer_norm(&format!("enc{l}.ln1"), d),
                ffn: b.ffn(&format!("enc{l}.ffn"), d, cfg.ff_inner()),
                ln2: b.layer_norm(&format!("enc{l}.ln2"), d),
            })
            .collect();

        let sigma0 = 0.5f32;
        let slot_init = match cfg.init_mode {
            SlotInitMode::Shared => SlotInitParams {
                mu: b.gauss("slots.mu", 1, ds, 1.0 / (ds as f64).sqrt()),
                log_sigma: Some(b.full("slots.log_sigma", ds, sigma0.ln())),
            },
            SlotInitMode::PerSlotMu => SlotInitParams {
                mu: b.gauss("slots.mu", cfg.k_slots, ds, 1.0 / (ds as f64).sqrt()),
                log_sigma: None,
            },
            SlotInitMode::Positional => SlotInitParams {
                mu: b.gauss("slots.mu", 1, ds, 1.0 / (ds as f64).sqrt()),
                log_sigma: Some(b.full("slots.log_sigma", ds, sigma0.ln())),
            },
        };

        let slot_attn = SlotAttnParams {
            ln_inputs: b.layer_norm("slots.ln_in", d),
            ln_slots: b.layer_norm("slots.ln_slots", ds),
            ln_mlp: b.layer_norm("slots.ln_mlp", ds),
            proj_q: b.xavier("slots.q", ds, ds),
            proj_k: b.xavier("slots.k", d, ds),
            proj_v: b.xavier("slots.v", d, ds),
            gru: b.gru("slots.gru", ds),
            mlp: b.ffn("slots.mlp", ds, ds),
        };

        let gate_w = b.gauss("gate.w", 1, ds, 1.0 / (ds as f64).sqrt());

        let dec = DecLayerParams {
            self_attn: b.attn("dec.self", d, d),
            ln1: b.layer_norm("dec.ln1", d),
            cross: b.attn("dec.cross", d, ds),
            ln2: b.layer_norm("dec.ln2", d),
            ffn: b.ffn("dec.ffn", d, cfg.ff_inner()),
            ln3: b.layer_norm("dec.ln3", d),
        };

        let out = b.linear("out", d, cfg.vocab_size);

        let ids = ModelParams { embed, enc_layers, slot_init, slot_attn, gate_w, dec, out };
        let pe_table = posenc::sinusoidal_table(cfg.max_len + 2, cfg.d_model);
        Ok(SlotAutoencoder { cfg, params, ids, seed, pe_table })
    }

    /// Bind all parameters into `g` and return per-graph context.
    pub fn begin<'a, S: Scalar>(&'a self, g: &mut Graph<S>) -> Result<ForwardCtx<'a>, ModelError> {
        let bound = self.params.bind(g)?;
        let p = self.ids.map(|pid| bound.id(pid));
        let pe = g.constant(&self.pe_table.cast::<S>())?;
        Ok(ForwardCtx { p, pe, cfg: &self.cfg, param_leaves: bound.ids().to_vec() })
    }

    /// Deterministic eval-noise stream for a given sentence key.
    pub fn eval_noise(&self, key: u64) -> ChaCha8Rng {
        seeds::stream(self.seed, seeds::TAG_BASELINE + 10, key)
    }
}

/// Per-graph binding of the model: parameter nodes and the shared positional
/// table.
pub struct ForwardCtx<'a> {
    pub p: ModelParams<NodeId>,
    pub pe: NodeId,
    pub cfg: &'a ModelConfig,
    /// Leaf ids in ParamSet order, for gradient readout.
    pub param_leaves: Vec<NodeId>,
}

/// Nodes produced by one sentence forward pass.
pub struct SentenceNodes {
    /// Decoder logits, (N+1) x vocab.
    pub logits: NodeId,
    /// Sum of per-position NLL over the N+1 teacher-forced positions.
    pub rec_sum: NodeId,
    pub n_positions: usize,
    pub gate: GateNodes,
    /// Slot-attention map, K x N.
    pub slot_attn: NodeId,
    /// Decoder cross-attention map, (N+1) x K.
    pub cross_attn: NodeId,
    /// Raw (ungated) slots, K x D_slots.
    pub slots_raw: NodeId,
}

/// Encoder: embedding (scaled by sqrt d), positional encodings, dropout and
/// the self-attention stack. Returns the N x d_model representation.
pub fn encode_sequence<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &ForwardCtx,
    char_ids: &[u32],
    mode: RunMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId, ModelError> {
    let cfg = ctx.cfg;
    let n = char_ids.len();
    if n == 0 {
        return Err(ModelError::EmptySequence);
    }
    if n > cfg.max_len {
        return Err(ModelError::TooLong { len: n, max: cfg.max_len });
    }
    let emb = g.embedding(ctx.p.embed, char_ids)?;
    let emb = g.scale(emb, (cfg.d_model as f64).sqrt())?;
    let pe = g.slice(ctx.pe, 0, 0, n)?;
    let mut x = g.add(emb, pe)?;
    if mode.is_train() {
        x = dropout(g, x, cfg.dropout, rng.as_deref_mut())?;
    }
    for layer in &ctx.p.enc_layers {
        let r = if mode.is_train() { rng.as_deref_mut() } else { None };
        x = encoder_layer(g, x, layer, cfg.enc_heads, cfg.dropout, r)?;
    }
    Ok(x)
}

/// Slot bottleneck: initialize slots, run slot attention, apply gates.
pub fn bottleneck<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &ForwardCtx,
    encoded: NodeId,
    mode: RunMode,
    rng: &mut ChaCha8Rng,
) -> Result<(GateNodes, NodeId, NodeId), ModelError> {
    let cfg = ctx.cfg;
    let init = init_slots(g, &ctx.p.slot_init, &cfg.init_spec(), rng)?;
    let sa = slot_attention(
        g,
        encoded,
        None,
        init,
        &ctx.p.slot_attn,
        &SlotAttnCfg { iters: cfg.iters, delta: cfg.delta },
    )?;
    let gate_mode = if mode.is_train() { GateMode::TrainSample } else { GateMode::EvalExpectation };
    let gate_rng = if mode.is_train() { Some(&mut *rng) } else { None };
    let gate = gate_forward(g, sa.slots, ctx.p.gate_w, &cfg.gate, gate_mode, gate_rng)?;
    Ok((gate, sa.attn, sa.slots))
}

/// Decoder over a teacher-forcing prefix (`dec_input_ids`, BOS first),
/// attending over the gated slots. Returns per-position logits and the
/// cross-attention map.
pub fn decode_sequence<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &ForwardCtx,
    dec_input_ids: &[u32],
    gated_slots: NodeId,
    mode: RunMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, NodeId), ModelError> {
    let cfg = ctx.cfg;
    let n = dec_input_ids.len();
    if n == 0 {
        return Err(ModelError::EmptySequence);
    }
    let emb = g.embedding(ctx.p.embed, dec_input_ids)?;
    let emb = g.scale(emb, (cfg.d_model as f64).sqrt())?;
    let pe = g.slice(ctx.pe, 0, 0, n)?;
    let mut x = g.add(emb, pe)?;
    if mode.is_train() {
        x = dropout(g, x, cfg.dropout, rng.as_deref_mut())?;
    }
    let r = if mode.is_train() { rng.as_deref_mut() } else { None };
    let (h, cross_attn) = decoder_layer(
        g,
        x,
        gated_slots,
        &ctx.p.dec,
        cfg.dec_self_heads,
        cfg.dec_cross_heads,
        cfg.dropout,
        r,
    )?;
    let logits = layers::linear(g, h, &ctx.p.out)?;
    Ok((logits, cross_attn))
}

/// Mean cross-entropy over the positions where `mask` is true.
pub fn reconstruction_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    targets: &[u32],
    mask: &[bool],
) -> Result<NodeId, ModelError> {
    if targets.len() != mask.len() {
        return Err(ModelError::Config(format!(
            "{} targets vs {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(ModelError::EmptySequence);
    }
    let weights: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / valid as f64 } else { 0.0 })
        .collect();
    Ok(g.cross_entropy(logits, targets, &weights)?)
}

/// Full teacher-forced forward pass for one sentence of raw character ids.
pub fn forward_sentence<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &ForwardCtx,
    char_ids: &[u32],
    mode: RunMode,
    rng: &mut ChaCha8Rng,
) -> Result<SentenceNodes, ModelError> {
    let encoded = encode_sequence(g, ctx, char_ids, mode, Some(&mut *rng))?;
    let (gate, slot_attn, slots_raw) = bottleneck(g, ctx, encoded, mode, rng)?;

    let mut dec_input = Vec::with_capacity(char_ids.len() + 1);
    dec_input.push(BOS_ID);
    dec_input.extend_from_slice(char_ids);
    let (logits, cross_attn) =
        decode_sequence(g, ctx, &dec_input, gate.gated_slots, mode, Some(&mut *rng))?;

    let mut targets = Vec::with_capacity(char_ids.len() + 1);
    targets.extend_from_slice(char_ids);
    targets.push(EOS_ID);
    let weights = vec![1.0; targets.len()];
    let rec_sum = g.cross_entropy(logits, &targets, &weights)?;

    Ok(SentenceNodes {
        logits,
        rec_sum,
        n_positions: targets.len(),
        gate,
        slot_attn,
        cross_attn,
        slots_raw,
    })
}

/// Loss nodes for a whole batch sharing one parameter binding.
pub struct BatchNodes {
    /// rec_mean + lambda * l0_mean (or just rec_mean without the penalty branch).
    pub total: NodeId,
    /// Token-mean NLL over all valid positions in the batch.
    pub rec_mean: NodeId,
    /// Mean expected-open-gate penalty per sentence.
    pub l0_mean: NodeId,
    pub n_positions: usize,
    /// Count of strictly positive sampled gates, summed over sentences.
    pub open_gates_sampled: usize,
    pub sentences: Vec<SentenceNodes>,
}

/// Teacher-forced loss over a batch. When `include_l0` is false the penalty
/// branch is not built at all (used to verify the lambda = 0 identity).
pub fn batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    ctx: &ForwardCtx,
    batch: &crate::corpus::Batch,
    lambda: f64,
    mode: RunMode,
    rng: &mut ChaCha8Rng,
    include_l0: bool,
) -> Result<BatchNodes, ModelError> {
    if batch.size == 0 {
        return Err(ModelError::EmptySequence);
    }
    let mut sentences = Vec::with_capacity(batch.size);
    let mut rec_total: Option<NodeId> = None;
    let mut l0_total: Option<NodeId> = None;
    let mut positions = 0usize;
    let mut open = 0usize;
    for r in 0..batch.size {
        let sf = forward_sentence(g, ctx, batch.sentence(r), mode, rng)?;
        positions += sf.n_positions;
        open += g
            .data(sf.gate.gates)
            .iter()
            .filter(|v| **v > S::zero())
            .count();
        rec_total = Some(match rec_total {
            Some(acc) => g.add(acc, sf.rec_sum)?,
            None => sf.rec_sum,
        });
        if include_l0 {
            l0_total = Some(match l0_total {
                Some(acc) => g.add(acc, sf.gate.penalty)?,
                None => sf.gate.penalty,
            });
        }
        sentences.push(sf);
    }
    let rec_mean = g.scale(rec_total.expect("non-empty batch"), 1.0 / positions as f64)?;
    let (l0_mean, total) = match l0_total {
        Some(t) => {
            let l0_mean = g.scale(t, 1.0 / batch.size as f64)?;
            let weighted = g.scale(l0_mean, lambda)?;
            (l0_mean, g.add(rec_mean, weighted)?)
        }
        None => {
            let zero = g.scalar_const(0.0);
            (zero, rec_mean)
        }
    };
    Ok(BatchNodes {
        total,
        rec_mean,
        l0_mean,
        n_positions: positions,
        open_gates_sampled: open,
        sentences,
    })
}

/// Deterministic eval-mode artifacts for one sentence.
#[derive(Debug, Clone)]
pub struct SentenceAnalysis {
    pub gates: Vec<f32>,
    pub log_alpha: Vec<f32>,
    pub open_count: usize,
    pub expected_open: f64,
    /// Gated slots M', K x D_slots (closed gates give zero rows).
    pub gated_slots: Tensor<f32>,
    /// Slot-attention map, K x N.
    pub slot_attn: Tensor<f32>,
    /// Decoder cross-attention under teacher forcing, (N+1) x K.
    pub cross_attn: Tensor<f32>,
    pub teacher_nll_sum: f64,
    pub n_positions: usize,
    /// Teacher-forced argmax hits against the gold targets.
    pub correct: usize,
}

/// Eval-mode bottleneck output for one sentence.
#[derive(Debug, Clone)]
pub struct GatedSlots {
    /// M', K x D_slots; closed gates give zero rows.
    pub slots: Tensor<f32>,
    pub gates: Vec<f32>,
    pub log_alpha: Vec<f32>,
    pub open_count: usize,
    pub expected_open: f64,
}

impl SlotAutoencoder {
    /// Encoder + bottleneck only (no decoding); the cheap path used when
    /// collecting slot vectors for probing.
    pub fn eval_slots(&self, char_ids: &[u32], noise_key: u64) -> Result<GatedSlots, ModelError> {
        let mut g = Graph::<f32>::new();
        let ctx = self.begin(&mut g)?;
        let mut rng = self.eval_noise(noise_key);
        let encoded = encode_sequence(&mut g, &ctx, char_ids, RunMode::Eval, None)?;
        let (gate, _, _) = bottleneck(&mut g, &ctx, encoded, RunMode::Eval, &mut rng)?;
        let gates: Vec<f32> = g.data(gate.gates).to_vec();
        Ok(GatedSlots {
            slots: g.tensor(gate.gated_slots),
            open_count: gates.iter().filter(|&&v| v > 0.0).count(),
            expected_open: g.data(gate.penalty)[0] as f64,
            log_alpha: g.data(gate.log_alpha).to_vec(),
            gates,
        })
    }

    /// Mean eval-mode open-gate count over a corpus.
    pub fn mean_open_gates(&self, seqs: &[CharSequence]) -> Result<f64, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut total = 0usize;
        for (i, s) in seqs.iter().enumerate() {
            total += self.eval_slots(&s.ids, i as u64)?.open_count;
        }
        Ok(total as f64 / seqs.len() as f64)
    }

    /// Teacher-forced eval pass; `noise_key` fixes the slot-init noise so the
    /// same sentence always yields the same slots.
    pub fn analyze(&self, char_ids: &[u32], noise_key: u64) -> Result<SentenceAnalysis, ModelError> {
        let mut g = Graph::<f32>::new();
        let ctx = self.begin(&mut g)?;
        let mut rng = self.eval_noise(noise_key);
        let sf = forward_sentence(&mut g, &ctx, char_ids, RunMode::Eval, &mut rng)?;

        let gates: Vec<f32> = g.data(sf.gate.gates).to_vec();
        let log_alpha: Vec<f32> = g.data(sf.gate.log_alpha).to_vec();
        let open_count = gates.iter().filter(|&&v| v > 0.0).count();
        let expected_open = g.data(sf.gate.penalty)[0] as f64;

        // teacher-forced accuracy
        let (rows, cols) = g.shape(sf.logits);
        let logits = g.data(sf.logits);
        let mut targets: Vec<u32> = char_ids.to_vec();
        targets.push(EOS_ID);
        let mut correct = 0usize;
        for i in 0..rows {
            let row = &logits[i * cols..(i + 1) * cols];
            let mut best = 0usize;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == targets[i] {
                correct += 1;
            }
        }

        Ok(SentenceAnalysis {
            gates,
            log_alpha,
            open_count,
            expected_open,
            gated_slots: g.tensor(sf.gate.gated_slots),
            slot_attn: g.tensor(sf.slot_attn),
            cross_attn: g.tensor(sf.cross_attn),
            teacher_nll_sum: g.data(sf.rec_sum)[0] as f64,
            n_positions: sf.n_positions,
            correct,
        })
    }

    pub fn analyze_corpus(
        &self,
        seqs: &[CharSequence],
    ) -> Result<Vec<SentenceAnalysis>, ModelError> {
        seqs.iter()
            .enumerate()
            .map(|(i, s)| self.analyze(&s.ids, i as u64))
            .collect()
    }

    /// Teacher-forced character accuracy over a corpus.
    pub fn teacher_forced_accuracy(&self, seqs: &[CharSequence]) -> Result<f64, ModelError> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, s) in seqs.iter().enumerate() {
            let a = self.analyze(&s.ids, i as u64)?;
            correct += a.correct;
            total += a.n_positions;
        }
        Ok(correct as f64 / total as f64)
    }

    /// Greedy autoregressive reconstruction from a fixed gated slot set.
    /// Stops at EOS or after `max_len` characters.
    pub fn greedy_reconstruct(
        &self,
        gated_slots: &Tensor<f32>,
        max_len: usize,
    ) -> Result<Vec<u32>, ModelError> {
        let mut out: Vec<u32> = Vec::new();
        loop {
            let mut g = Graph::<f32>::new();
            let ctx = self.begin(&mut g)?;
            let slots = g.constant(gated_slots)?;
            let mut dec_input = Vec::with_capacity(out.len() + 1);
            dec_input.push(BOS_ID);
            dec_input.extend_from_slice(&out);
            let (logits, _) = decode_sequence(&mut g, &ctx, &dec_input, slots, RunMode::Eval, None)?;
            let (rows, cols) = g.shape(logits);
            let row = &g.data(logits)[(rows - 1) * cols..rows * cols];
            let mut best = 0usize;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best as u32 == EOS_ID || out.len() >= max_len {
                return Ok(out);
            }
            out.push(best as u32);
        }
    }
}

/// An untrained model of the same shape, used as the probing baseline.
pub fn untrained_like(cfg: &ModelConfig, seed: u64) -> Result<SlotAutoencoder, ModelError> {
    SlotAutoencoder::new(cfg.clone(), seed)
}
