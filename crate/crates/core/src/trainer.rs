//! Training loop: Adam with gradient clipping, the lambda schedule for the
//! gate penalty, metrics logging and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::{self, CheckpointData, CheckpointError};
use crate::corpus::{make_batches, CharSequence, CorpusError};
use crate::diff::{DiffError, Graph, Tensor};
use crate::gates::GateCfg;
use crate::model::{batch_loss, ModelConfig, ModelError, RunMode, SlotAutoencoder};
use crate::seeds;
use crate::slotattn::SlotInitMode;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("NaN loss at epoch {epoch}, step {step}; offending batch:\n{dump}")]
    NanLoss { epoch: u32, step: u64, dump: String },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {name} has dims {got:?}, expected {expected:?}")]
    TensorShape { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint is missing config key {0}")]
    MissingKey(String),
    #[error("bad config value for {key}: {value:?}")]
    BadValue { key: String, value: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lambda schedule and optimizer settings. Lambda starts low and doubles
/// (by `multiplier`) every `period_epochs`, capped at `lambda_max`.
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub lambda0: f64,
    pub multiplier: f64,
    pub period_epochs: u32,
    pub lambda_max: f64,
    pub epochs: u32,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint every k epochs (0 = final checkpoint only).
    pub checkpoint_every: u32,
    pub clip_norm: f32,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lambda0: 2e-5,
            multiplier: 2.0,
            period_epochs: 10,
            lambda_max: 1e-2,
            epochs: 200,
            lr: 1e-4,
            batch_size: 32,
            seed: 1,
            checkpoint_every: 0,
            clip_norm: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda0 < 0.0 || self.lambda_max < 0.0 {
            return Err(TrainError::Schedule("lambda values must be non-negative".into()));
        }
        if self.multiplier < 1.0 {
            return Err(TrainError::Schedule("multiplier must be at least 1".into()));
        }
        if self.period_epochs == 0 {
            return Err(TrainError::Schedule("period_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Schedule("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Schedule("lr must be positive".into()));
        }
        Ok(())
    }
}

/// lambda(e) = min(lambda_max, lambda0 * multiplier^floor(e / period)).
pub fn lambda_at(epoch: u32, sched: &TrainSchedule) -> f64 {
    let k = (epoch / sched.period_epochs) as f64;
    (sched.lambda0 * sched.multiplier.powf(k)).min(sched.lambda_max)
}

/// Heuristic cap: an open gate must be worth at least one character of
/// uniform-entropy reconstruction, ln(vocab) spread over the mean sentence.
pub fn suggest_lambda_max(char_vocab_size: usize, mean_sentence_chars: f64) -> f64 {
    (char_vocab_size.max(2) as f64).ln() / mean_sentence_chars.max(1.0)
}

/// Adam with bias correction; moments are stored per parameter tensor and
/// serialized with the checkpoint.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: &[usize], lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &crate::params::ParamSet, lr: f32) -> Adam {
        let sizes: Vec<usize> = params.iter().map(|(_, _, t)| t.len()).collect();
        Adam::new(&sizes, lr)
    }

    /// One update over all parameters; `grads` is parallel to the parameter
    /// set, in insertion order.
    pub fn step(&mut self, params: &mut crate::params::ParamSet, grads: &[Vec<f32>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(crate::params::ParamId(i));
            let pd = p.data_mut();
            for j in 0..grads[i].len() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pd[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients in place so the global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut [Vec<f32>], clip: f32) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if clip > 0.0 && norm > clip as f64 {
        let scale = (clip as f64 / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    pub step: u64,
    pub rec: f64,
    pub l0: f64,
    pub lambda: f64,
    pub open_gates_mean: f64,
}

impl EpochMetrics {
    pub fn tsv_header() -> &'static str {
        "epoch\tstep\tl_rec\tl0\tlambda\topen_gates_mean"
    }

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            self.epoch, self.step, self.rec, self.l0, self.lambda, self.open_gates_mean
        )
    }
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Test hook: when false the penalty branch is not built at all.
    pub include_l0: bool,
}

impl TrainOptions {
    pub fn new() -> TrainOptions {
        TrainOptions { metrics_path: None, checkpoint_dir: None, include_l0: true }
    }
}

/// Full training state: model, optimizer and schedule position. Resume from
/// an epoch-boundary checkpoint reproduces the uninterrupted run exactly
/// because every RNG stream is derived from (seed, epoch).
pub struct TrainState {
    pub model: SlotAutoencoder,
    pub adam: Adam,
    pub sched: TrainSchedule,
    pub next_epoch: u32,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(cfg: ModelConfig, sched: TrainSchedule) -> Result<TrainState, TrainError> {
        sched.validate()?;
        let model = SlotAutoencoder::new(cfg, sched.seed)?;
        let adam = Adam::for_params(&model.params, sched.lr);
        Ok(TrainState { model, adam, sched, next_epoch: 0, global_step: 0 })
    }

    /// Run epochs `next_epoch..sched.epochs` over `seqs`.
    pub fn run(
        &mut self,
        seqs: &[CharSequence],
        opts: &TrainOptions,
    ) -> Result<Vec<EpochMetrics>, TrainError> {
        if seqs.is_empty() {
            return Err(TrainError::Corpus(CorpusError::EmptyCorpus));
        }
        let mut out = Vec::new();
        let mut metrics_file = match &opts.metrics_path {
            Some(p) => {
                let existed = p.exists();
                let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                if !existed {
                    writeln!(f, "{}", EpochMetrics::tsv_header())?;
                }
                Some(f)
            }
            None => None,
        };
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }

        while self.next_epoch < self.sched.epochs {
            let epoch = self.next_epoch;
            let lambda = lambda_at(epoch, &self.sched);
            let shuffle_seed = self
                .sched
                .seed
                .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E3779B97F4A7C15));
            let batches = make_batches(seqs, self.sched.batch_size, shuffle_seed)?;
            let mut rng = seeds::stream(self.sched.seed, seeds::TAG_EPOCH, epoch as u64);

            let mut rec_weighted = 0.0f64;
            let mut l0_weighted = 0.0f64;
            let mut positions = 0usize;
            let mut sentences = 0usize;
            let mut open = 0usize;

            for batch in &batches {
                let mut g = Graph::<f32>::new();
                let ctx = self.model.begin(&mut g)?;
                let nodes = batch_loss(
                    &mut g,
                    &ctx,
                    batch,
                    lambda,
                    RunMode::Train,
                    &mut rng,
                    opts.include_l0,
                )?;
                let total = g.data(nodes.total)[0];
                if !total.is_finite() {
                    let dump = dump_batch(batch, seqs);
                    return Err(TrainError::NanLoss { epoch, step: self.global_step, dump });
                }
                rec_weighted += g.data(nodes.rec_mean)[0] as f64 * nodes.n_positions as f64;
                l0_weighted += g.data(nodes.l0_mean)[0] as f64 * batch.size as f64;
                positions += nodes.n_positions;
                sentences += batch.size;
                open += nodes.open_gates_sampled;

                let grads_out = g.backward(nodes.total, None)?;
                let mut grads: Vec<Vec<f32>> = Vec::with_capacity(ctx.param_leaves.len());
                for (i, &leaf) in ctx.param_leaves.iter().enumerate() {
                    match grads_out.get(leaf) {
                        Some(gd) => grads.push(gd.to_vec()),
                        None => grads.push(vec![
                            0.0;
                            self.model.params.get(crate::params::ParamId(i)).len()
                        ]),
                    }
                }
                drop(g);
                clip_global_norm(&mut grads, self.sched.clip_norm);
                self.adam.step(&mut self.model.params, &grads);
                self.global_step += 1;
            }

            let m = EpochMetrics {
                epoch,
                step: self.global_step,
                rec: rec_weighted / positions as f64,
                l0: l0_weighted / sentences as f64,
                lambda,
                open_gates_mean: open as f64 / sentences as f64,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", m.tsv_row())?;
            }
            out.push(m);
            self.next_epoch += 1;

            if let Some(dir) = &opts.checkpoint_dir {
                let every = self.sched.checkpoint_every;
                if every > 0 && self.next_epoch % every == 0 && self.next_epoch < self.sched.epochs {
                    checkpoint::save_to_file(
                        dir.join(format!("epoch_{:04}.ckpt", self.next_epoch)),
                        &self.to_checkpoint(),
                    )?;
                }
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            checkpoint::save_to_file(dir.join("final.ckpt"), &self.to_checkpoint())?;
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let mut config = BTreeMap::new();
        model_config_to_kv(&self.model.cfg, &mut config);
        sched_to_kv(&self.sched, &mut config);
        config.insert("next_epoch".into(), self.next_epoch.to_string());
        config.insert("global_step".into(), self.global_step.to_string());
        config.insert("adam_t".into(), self.adam.t.to_string());

        let mut tensors = Vec::new();
        for (pid, name, t) in self.model.params.iter() {
            tensors.push((name.to_string(), t.clone()));
            tensors.push((
                format!("opt.m.{name}"),
                Tensor::new(t.dims().to_vec(), self.adam.m[pid.0].clone()).expect("moment dims"),
            ));
            tensors.push((
                format!("opt.v.{name}"),
                Tensor::new(t.dims().to_vec(), self.adam.v[pid.0].clone()).expect("moment dims"),
            ));
        }
        CheckpointData { config, tensors }
    }

    pub fn from_checkpoint(data: &CheckpointData) -> Result<TrainState, TrainError> {
        let cfg = model_config_from_kv(&data.config)?;
        let sched = sched_from_kv(&data.config)?;
        let next_epoch: u32 = parse_key(&data.config, "next_epoch")?;
        let global_step: u64 = parse_key(&data.config, "global_step")?;
        let adam_t: u64 = parse_key(&data.config, "adam_t")?;

        let mut model = SlotAutoencoder::new(cfg, sched.seed)?;
        let mut adam = Adam::for_params(&model.params, sched.lr);
        adam.t = adam_t;
        let names: Vec<String> = model
            .params
            .iter()
            .map(|(_, n, _)| n.to_string())
            .collect();
        for name in names {
            let pid = model.params.find(&name).expect("own name");
            load_tensor_into(data, &name, model.params.get_mut(pid))?;
            let mut m = model.params.get(pid).clone();
            load_tensor_into(data, &format!("opt.m.{name}"), &mut m)?;
            adam.m[pid.0] = m.into_data();
            let mut v = model.params.get(pid).clone();
            load_tensor_into(data, &format!("opt.v.{name}"), &mut v)?;
            adam.v[pid.0] = v.into_data();
        }
        Ok(TrainState { model, adam, sched, next_epoch, global_step })
    }
}

/// Load just the model (ignores optimizer tensors; used by probing and
/// attention export).
pub fn load_model(data: &CheckpointData) -> Result<SlotAutoencoder, TrainError> {
    let cfg = model_config_from_kv(&data.config)?;
    let seed: u64 = parse_key(&data.config, "seed")?;
    let mut model = SlotAutoencoder::new(cfg, seed)?;
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        let pid = model.params.find(&name).expect("own name");
        load_tensor_into(data, &name, model.params.get_mut(pid))?;
    }
    Ok(model)
}

fn load_tensor_into(
    data: &CheckpointData,
    name: &str,
    dst: &mut Tensor<f32>,
) -> Result<(), TrainError> {
    let src = data
        .tensor(name)
        .ok_or_else(|| TrainError::MissingTensor(name.to_string()))?;
    if src.dims() != dst.dims() {
        return Err(TrainError::TensorShape {
            name: name.to_string(),
            got: src.dims().to_vec(),
            expected: dst.dims().to_vec(),
        });
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

fn dump_batch(batch: &crate::corpus::Batch, seqs: &[CharSequence]) -> String {
    let mut s = String::new();
    for (&idx, len) in batch.source_idx.iter().zip(&batch.lens) {
        let raw = seqs.get(idx).map(|q| q.raw.as_str()).unwrap_or("<missing>");
        s.push_str(&format!("  sentence {idx} ({len} chars): {raw}\n"));
    }
    s
}

pub fn model_config_to_kv(cfg: &ModelConfig, kv: &mut BTreeMap<String, String>) {
    kv.insert("vocab_size".into(), cfg.vocab_size.to_string());
    kv.insert("d_model".into(), cfg.d_model.to_string());
    kv.insert("enc_layers".into(), cfg.enc_layers.to_string());
    kv.insert("enc_heads".into(), cfg.enc_heads.to_string());
    kv.insert("dec_self_heads".into(), cfg.dec_self_heads.to_string());
    kv.insert("dec_cross_heads".into(), cfg.dec_cross_heads.to_string());
    kv.insert("k_slots".into(), cfg.k_slots.to_string());
    kv.insert("d_slots".into(), cfg.d_slots.to_string());
    kv.insert("iters".into(), cfg.iters.to_string());
    kv.insert("max_len".into(), cfg.max_len.to_string());
    kv.insert("init_mode".into(), cfg.init_mode.name().to_string());
    kv.insert("sigma_const".into(), cfg.sigma_const.to_string());
    kv.insert("gate_beta".into(), cfg.gate.beta.to_string());
    kv.insert("gate_epsilon".into(), cfg.gate.epsilon.to_string());
    kv.insert("delta".into(), cfg.delta.to_string());
    kv.insert("dropout".into(), cfg.dropout.to_string());
}

fn parse_key<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
) -> Result<T, TrainError> {
    let raw = kv
        .get(key)
        .ok_or_else(|| TrainError::MissingKey(key.to_string()))?;
    raw.parse()
        .map_err(|_| TrainError::BadValue { key: key.to_string(), value: raw.clone() })
}

pub fn model_config_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig, TrainError> {
    let init_raw: String = parse_key(kv, "init_mode")?;
    let init_mode = SlotInitMode::parse(&init_raw).ok_or(TrainError::BadValue {
        key: "init_mode".into(),
        value: init_raw,
    })?;
    Ok(ModelConfig {
        vocab_size: parse_key(kv, "vocab_size")?,
        d_model: parse_key(kv, "d_model")?,
        enc_layers: parse_key(kv, "enc_layers")?,
        enc_heads: parse_key(kv, "enc_heads")?,
        dec_self_heads: parse_key(kv, "dec_self_heads")?,
        dec_cross_heads: parse_key(kv, "dec_cross_heads")?,
        k_slots: parse_key(kv, "k_slots")?,
        d_slots: parse_key(kv, "d_slots")?,
        iters: parse_key(kv, "iters")?,
        max_len: parse_key(kv, "max_len")?,
        init_mode,
        sigma_const: parse_key(kv, "sigma_const")?,
        gate: GateCfg {
            beta: parse_key(kv, "gate_beta")?,
            epsilon: parse_key(kv, "gate_epsilon")?,
        },
        delta: parse_key(kv, "delta")?,
        dropout: parse_key(kv, "dropout")?,
    })
}

pub fn sched_to_kv(sched: &TrainSchedule, kv: &mut BTreeMap<String, String>) {
    kv.insert("lambda0".into(), sched.lambda0.to_string());
    kv.insert("multiplier".into(), sched.multiplier.to_string());
    kv.insert("period_epochs".into(), sched.period_epochs.to_string());
    kv.insert("lambda_max".into(), sched.lambda_max.to_string());
    kv.insert("epochs".into(), sched.epochs.to_string());
    kv.insert("lr".into(), sched.lr.to_string());
    kv.insert("batch_size".into(), sched.batch_size.to_string());
    kv.insert("seed".into(), sched.seed.to_string());
    kv.insert("checkpoint_every".into(), sched.checkpoint_every.to_string());
    kv.insert("clip_norm".into(), sched.clip_norm.to_string());
}

pub fn sched_from_kv(kv: &BTreeMap<String, String>) -> Result<TrainSchedule, TrainError> {
    Ok(TrainSchedule {
        lambda0: parse_key(kv, "lambda0")?,
        multiplier: parse_key(kv, "multiplier")?,
        period_epochs: parse_key(kv, "period_epochs")?,
        lambda_max: parse_key(kv, "lambda_max")?,
        epochs: parse_key(kv, "epochs")?,
        lr: parse_key(kv, "lr")?,
        batch_size: parse_key(kv, "batch_size")?,
        seed: parse_key(kv, "seed")?,
        checkpoint_every: parse_key(kv, "checkpoint_every")?,
        clip_norm: parse_key(kv, "clip_norm")?,
    })
}

/// Convenience wrapper: fresh state, run to completion.
pub fn train(
    seqs: &[CharSequence],
    cfg: ModelConfig,
    sched: TrainSchedule,
    opts: &TrainOptions,
) -> Result<(TrainState, Vec<EpochMetrics>), TrainError> {
    let mut state = TrainState::new(cfg, sched)?;
    let metrics = state.run(seqs, opts)?;
    Ok((state, metrics))
}
