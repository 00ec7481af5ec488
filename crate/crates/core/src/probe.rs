//! Probing classifier over frozen slot vectors.
//!
//! A small shared classifier maps each slot to a label distribution over the
//! target token vocabulary plus an `empty` label for pruned slots. Because
//! targets are an unordered set, predictions are aligned to targets with an
//! exact minimum-cost Hungarian matching before the cross-entropy loss and
//! before the confusion counts (non-empty = positive).

use std::collections::HashMap;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::corpus::CharSequence;
use crate::diff::{DiffError, Graph, NodeId, Tensor};
use crate::model::{ModelError, SlotAutoencoder};
use crate::params::{ParamId, ParamSet};
use crate::seeds;
use crate::trainer::{clip_global_norm, Adam};

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("hungarian: {0}")]
    Hungarian(String),
    #[error("probe config error: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Exact minimum-cost perfect matching on a square cost matrix (row-major,
/// `n` x `n`). Returns the column assigned to each row and the total cost
/// (summed in row order).
pub fn hungarian(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64), ProbeError> {
    if n == 0 || cost.len() != n * n {
        return Err(ProbeError::Hungarian(format!(
            "cost matrix of {} entries is not {n}x{n}",
            cost.len()
        )));
    }
    if let Some(bad) = cost.iter().find(|v| !v.is_finite()) {
        return Err(ProbeError::Hungarian(format!("non-finite cost {bad}")));
    }

    // shortest-augmenting-path formulation with potentials, 1-indexed
    let inf = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    let total = row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((row_to_col, total))
}

/// Label id space for one probing task: observed training tokens, a
/// catch-all for unseen test tokens, and the empty label for pruned slots.
#[derive(Debug, Clone)]
pub struct LabelVocab {
    labels: Vec<String>,
    by_name: HashMap<String, u32>,
    pub other_id: u32,
    pub empty_id: u32,
}

pub const OTHER_LABEL: &str = "<other>";
pub const EMPTY_LABEL: &str = "<empty>";

impl LabelVocab {
    /// Closed label set from the training targets. Unseen tokens map to the
    /// catch-all, which is never creditable as a true positive.
    pub fn build(train_targets: &[Vec<String>]) -> LabelVocab {
        let mut labels: Vec<String> = train_targets
            .iter()
            .flatten()
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let other_id = labels.len() as u32;
        labels.push(OTHER_LABEL.to_string());
        let empty_id = labels.len() as u32;
        let by_name = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i as u32))
            .collect();
        LabelVocab { labels, by_name, other_id, empty_id }
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.by_name.get(token).copied().unwrap_or(self.other_id)
    }

    pub fn name_of(&self, id: u32) -> &str {
        if id == self.empty_id {
            EMPTY_LABEL
        } else {
            &self.labels[id as usize]
        }
    }

    /// Real labels plus catch-all (excludes empty).
    pub fn n_real(&self) -> usize {
        self.labels.len()
    }

    /// Classifier output width: real labels, catch-all, empty.
    pub fn n_classes(&self) -> usize {
        self.labels.len() + 1
    }
}

/// Slot vectors and padded targets for one probing split.
#[derive(Debug, Default)]
pub struct ProbeDataset {
    /// Gated slot matrices, K x D each.
    pub slots: Vec<Tensor<f32>>,
    /// Target label ids padded with the empty label to K.
    pub targets: Vec<Vec<u32>>,
    /// Index of each kept sentence in the source corpus.
    pub kept: Vec<usize>,
    pub skipped: usize,
}

impl ProbeDataset {
    /// Pair slot sets with padded targets, dropping sentences whose real
    /// target count exceeds K.
    pub fn build(
        slot_sets: &[Tensor<f32>],
        raw_targets: &[Vec<String>],
        labels: &LabelVocab,
        source_idx: &[usize],
    ) -> Result<ProbeDataset, ProbeError> {
        if slot_sets.len() != raw_targets.len() || slot_sets.len() != source_idx.len() {
            return Err(ProbeError::Config(format!(
                "{} slot sets vs {} target lists vs {} indices",
                slot_sets.len(),
                raw_targets.len(),
                source_idx.len()
            )));
        }
        let mut out = ProbeDataset::default();
        for ((slots, toks), &src) in slot_sets.iter().zip(raw_targets).zip(source_idx) {
            let k = slots.rows();
            if toks.len() > k {
                out.skipped += 1;
                continue;
            }
            let mut ids: Vec<u32> = toks.iter().map(|t| labels.id_of(t)).collect();
            ids.resize(k, labels.empty_id);
            out.slots.push(slots.clone());
            out.targets.push(ids);
            out.kept.push(src);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ProbeCfg {
    pub hidden: usize,
    pub epochs: u32,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl ProbeCfg {
    pub fn new(hidden: usize) -> ProbeCfg {
        ProbeCfg { hidden, epochs: 50, lr: 1e-3, batch: 64, seed: 11 }
    }
}

/// Two affine layers with a ReLU between, applied to every slot with shared
/// parameters.
pub struct ProbeModel {
    pub params: ParamSet,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub d_in: usize,
    pub n_classes: usize,
}

impl ProbeModel {
    pub fn new(d_in: usize, hidden: usize, n_classes: usize, seed: u64) -> ProbeModel {
        let mut params = ParamSet::new();
        let mut rng = seeds::stream(seed, seeds::TAG_PROBE, 0);
        let x1 = (2.0 / (d_in + hidden) as f64).sqrt();
        let x2 = (2.0 / (hidden + n_classes) as f64).sqrt();
        let w1 = params.add("probe.w1", Tensor::randn(d_in, hidden, x1, &mut rng));
        let b1 = params.add("probe.b1", Tensor::zeros(&[1, hidden]));
        let w2 = params.add("probe.w2", Tensor::randn(hidden, n_classes, x2, &mut rng));
        let b2 = params.add("probe.b2", Tensor::zeros(&[1, n_classes]));
        ProbeModel { params, w1, b1, w2, b2, d_in, n_classes }
    }

    fn logits_with(
        &self,
        g: &mut Graph<f32>,
        bound: &crate::params::BoundParams,
        slots: NodeId,
    ) -> Result<NodeId, ProbeError> {
        let h = g.matmul(slots, bound.id(self.w1))?;
        let h = g.add_bias(h, bound.id(self.b1))?;
        let h = g.relu(h)?;
        let out = g.matmul(h, bound.id(self.w2))?;
        Ok(g.add_bias(out, bound.id(self.b2))?)
    }

    /// Per-slot logits for one slot matrix (eval path).
    pub fn logits(&self, slots: &Tensor<f32>) -> Result<Tensor<f32>, ProbeError> {
        let mut g = Graph::<f32>::new();
        let bound = self.params.bind(&mut g)?;
        let s = g.constant(slots)?;
        let l = self.logits_with(&mut g, &bound, s)?;
        Ok(g.tensor(l))
    }
}

/// Cross-entropy cost of predicting target class `t` from each logit row.
fn cost_matrix(logits: &Tensor<f32>, targets: &[u32]) -> Vec<f64> {
    let k = logits.rows();
    let c = logits.cols();
    let mut out = vec![0.0f64; k * k];
    for i in 0..k {
        let row: Vec<f64> = (0..c).map(|j| logits.at(i, j) as f64).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (j, &t) in targets.iter().enumerate() {
            out[i * k + j] = lse - row[t as usize];
        }
    }
    out
}

/// Hungarian-matched cross-entropy loss for one sentence: builds the cost
/// matrix from the detached logits, matches, and returns the summed loss
/// node plus the slot-to-target assignment.
pub fn probe_loss(
    g: &mut Graph<f32>,
    logits: NodeId,
    targets: &[u32],
) -> Result<(NodeId, Vec<usize>), ProbeError> {
    let (k, _) = g.shape(logits);
    if targets.len() != k {
        return Err(ProbeError::Config(format!(
            "{} padded targets for {} slots",
            targets.len(),
            k
        )));
    }
    let lt = g.tensor(logits);
    let cost = cost_matrix(&lt, targets);
    let (assign, _) = hungarian(&cost, k)?;
    let matched: Vec<u32> = assign.iter().map(|&j| targets[j]).collect();
    let weights = vec![1.0f64; k];
    let loss = g.cross_entropy(logits, &matched, &weights)?;
    Ok((loss, assign))
}

/// Train the classifier on frozen slots. Returns per-epoch mean losses.
pub fn train_probe(
    model: &mut ProbeModel,
    data: &ProbeDataset,
    cfg: &ProbeCfg,
) -> Result<Vec<f64>, ProbeError> {
    if data.is_empty() {
        return Err(ProbeError::Config("empty probe dataset".into()));
    }
    let mut adam = Adam::for_params(&model.params, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = seeds::stream(cfg.seed, seeds::TAG_PROBE, 1 + epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            let mut g = Graph::<f32>::new();
            let bound = model.params.bind(&mut g)?;
            let mut total: Option<NodeId> = None;
            for &si in chunk {
                let s = g.constant(&data.slots[si])?;
                let logits = model.logits_with(&mut g, &bound, s)?;
                let (loss, _) = probe_loss(&mut g, logits, &data.targets[si])?;
                total = Some(match total {
                    Some(acc) => g.add(acc, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty chunk");
            let mean = g.scale(total, 1.0 / chunk.len() as f64)?;
            epoch_loss += g.data(total)[0] as f64;
            let grads_out = g.backward(mean, None)?;
            let mut grads = Vec::new();
            for (i, &leaf) in bound.ids().iter().enumerate() {
                match grads_out.get(leaf) {
                    Some(gd) => grads.push(gd.to_vec()),
                    None => grads.push(vec![0.0; model.params.get(ParamId(i)).len()]),
                }
            }
            drop(g);
            clip_global_norm(&mut grads, 5.0);
            adam.step(&mut model.params, &grads);
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(curve)
}

/// Aggregate confusion counts under the non-empty-positive convention, with
/// label-exact true positives.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean of per-sentence F1 scores (the alternative aggregation).
    pub f1_macro: f64,
    pub sentences: usize,
    pub skipped: usize,
}

fn prf(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// One row of the qualitative prediction dump.
#[derive(Debug, Clone)]
pub struct SlotPrediction {
    pub sentence: usize,
    pub slot: usize,
    pub predicted: String,
    pub target: String,
}

pub fn evaluate(
    model: &ProbeModel,
    data: &ProbeDataset,
    labels: &LabelVocab,
) -> Result<(ProbeMetrics, Vec<SlotPrediction>), ProbeError> {
    let mut m = ProbeMetrics { skipped: data.skipped, ..ProbeMetrics::default() };
    let mut dump = Vec::new();
    let mut macro_sum = 0.0f64;
    for si in 0..data.len() {
        let logits = model.logits(&data.slots[si])?;
        let k = logits.rows();
        let preds: Vec<u32> = (0..k)
            .map(|i| {
                let mut best = 0usize;
                for j in 1..logits.cols() {
                    if logits.at(i, j) > logits.at(i, best) {
                        best = j;
                    }
                }
                best as u32
            })
            .collect();
        let cost = cost_matrix(&logits, &data.targets[si]);
        let (assign, _) = hungarian(&cost, k)?;

        let (mut tp, mut fp, mut fnn, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for i in 0..k {
            let target = data.targets[si][assign[i]];
            let pred = preds[i];
            let pred_empty = pred == labels.empty_id;
            let target_empty = target == labels.empty_id;
            match (pred_empty, target_empty) {
                (false, false) => {
                    // the catch-all stands for unrecoverable tokens: never a hit
                    if pred == target && target != labels.other_id {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
                (false, true) => fp += 1,
                (true, false) => fnn += 1,
                (true, true) => tn += 1,
            }
            dump.push(SlotPrediction {
                sentence: data.kept[si],
                slot: i,
                predicted: labels.name_of(pred).to_string(),
                target: labels.name_of(target).to_string(),
            });
        }
        let (_, _, sentence_f1) = prf(tp, fp, fnn);
        macro_sum += sentence_f1;
        m.tp += tp;
        m.fp += fp;
        m.fn_ += fnn;
        m.tn += tn;
        m.sentences += 1;
    }
    let (p, r, f1) = prf(m.tp, m.fp, m.fn_);
    m.precision = p;
    m.recall = r;
    m.f1 = f1;
    m.f1_macro = if m.sentences == 0 { 0.0 } else { macro_sum / m.sentences as f64 };
    Ok((m, dump))
}

/// Collect eval-mode gated slot sets for every sequence.
pub fn collect_slots(
    model: &SlotAutoencoder,
    seqs: &[CharSequence],
) -> Result<Vec<Tensor<f32>>, ProbeError> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| Ok(model.eval_slots(&s.ids, i as u64)?.slots))
        .collect()
}

/// Untrained-model baseline: a freshly initialized model of the same shape
/// generates the slot vectors.
pub fn baseline_slots(
    cfg: &crate::model::ModelConfig,
    seed: u64,
    seqs: &[CharSequence],
) -> Result<Vec<Tensor<f32>>, ProbeError> {
    let model = crate::model::untrained_like(cfg, seed)?;
    collect_slots(&model, seqs)
}

/// Deterministic train/test split by sentence index (every fifth sentence is
/// held out).
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..n {
        if i % 5 == 4 {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_force_min(cost: &[f64], n: usize) -> f64 {
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, &mut |perm| {
            let mut s = 0.0;
            for (i, &j) in perm.iter().enumerate() {
                s += cost[i * n + j];
            }
            if s < best {
                best = s;
            }
        });
        best
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    // Spec'd 3x3 case, verified by brute force over all 6 permutations.
    #[test]
    fn hungarian_hand_case() {
        let cost = vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 3.0, 6.0, 9.0];
        let (assign, total) = hungarian(&cost, 3).unwrap();
        assert_eq!(assign, vec![2, 1, 0]);
        assert_eq!(total, 10.0);
        assert_eq!(brute_force_min(&cost, 3), 10.0);
    }

    #[test]
    fn hungarian_identity_on_diagonal() {
        let n = 4;
        let mut cost = vec![1.0; n * n];
        for i in 0..n {
            cost[i * n + i] = 0.0;
        }
        let (assign, total) = hungarian(&cost, n).unwrap();
        assert_eq!(assign, vec![0, 1, 2, 3]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn hungarian_constant_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 5;
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..1000) as f64).collect();
        let shifted: Vec<f64> = cost.iter().map(|v| v + 17.0).collect();
        let (_, t1) = hungarian(&cost, n).unwrap();
        let (_, t2) = hungarian(&shifted, n).unwrap();
        assert_eq!(t2, t1 + 17.0 * n as f64);
    }

    #[test]
    fn hungarian_matches_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in 2..=5usize {
            for _ in 0..50 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..1000) as f64).collect();
                let (_, total) = hungarian(&cost, n).unwrap();
                assert_eq!(total, brute_force_min(&cost, n), "n={n}");
            }
        }
    }

    #[test]
    fn hungarian_rejects_bad_input() {
        assert!(hungarian(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(hungarian(&[1.0, f64::NAN, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn metrics_arithmetic() {
        let (p, r, f1) = prf(3, 1, 2);
        assert_eq!(p, 0.75);
        assert!((r - 0.6).abs() < 1e-12);
        assert!((f1 - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-12);
        // zero denominators are defined as zero
        assert_eq!(prf(0, 0, 0), (0.0, 0.0, 0.0));
    }

    fn tiny_labels() -> LabelVocab {
        LabelVocab::build(&[vec!["aa".into(), "bb".into()], vec!["cc".into()]])
    }

    // K = 2 with predictions strongly favoring (A, B) but targets listed as
    // (B, A): the matching must cross.
    #[test]
    fn matching_crosses_when_cheaper() {
        let labels = tiny_labels();
        let a = labels.id_of("aa");
        let b = labels.id_of("bb");
        let mut g = Graph::<f32>::new();
        let mut data = vec![0.0f32; 2 * labels.n_classes()];
        data[a as usize] = 10.0; // slot 0 favors aa
        data[labels.n_classes() + b as usize] = 10.0; // slot 1 favors bb
        let logits = g
            .leaf(&Tensor::matrix(2, labels.n_classes(), data).unwrap(), false)
            .unwrap();
        let (_, assign) = probe_loss(&mut g, logits, &[b, a]).unwrap();
        // slot 0 takes target index 1 (aa), slot 1 takes index 0 (bb)
        assert_eq!(assign, vec![1, 0]);
    }

    #[test]
    fn duplicate_targets_use_distinct_slots() {
        let labels = tiny_labels();
        let a = labels.id_of("aa");
        let mut g = Graph::<f32>::new();
        let logits = g
            .leaf(&Tensor::zeros(&[3, labels.n_classes()]), false)
            .unwrap();
        let (_, assign) = probe_loss(&mut g, logits, &[a, a, labels.empty_id]).unwrap();
        let mut seen = assign.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn certain_empty_prediction_has_zero_loss() {
        let labels = tiny_labels();
        let mut g = Graph::<f32>::new();
        let k = 2;
        let mut data = vec![0.0f32; k * labels.n_classes()];
        for i in 0..k {
            data[i * labels.n_classes() + labels.empty_id as usize] = 60.0;
        }
        let logits = g
            .leaf(&Tensor::matrix(k, labels.n_classes(), data).unwrap(), false)
            .unwrap();
        let (loss, _) = probe_loss(&mut g, logits, &[labels.empty_id, labels.empty_id]).unwrap();
        assert!(g.data(loss)[0] < 1e-5);
    }

    #[test]
    fn always_empty_predictor_scores_zero() {
        let labels = tiny_labels();
        let d = 4;
        let mut model = ProbeModel::new(d, 4, labels.n_classes(), 1);
        // bias the output layer hard toward empty
        let b2 = model.params.find("probe.b2").unwrap();
        model.params.get_mut(b2).data_mut()[labels.empty_id as usize] = 100.0;

        let slots = vec![Tensor::full(&[3, d], 0.5); 4];
        let targets = vec![vec!["aa".to_string()]; 4];
        let data = ProbeDataset::build(&slots, &targets, &labels, &[0, 1, 2, 3]).unwrap();
        let (m, _) = evaluate(&model, &data, &labels).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.tp, 0);
        assert_eq!(m.fn_, 4);
        assert_eq!(m.tp + m.fp + m.fn_ + m.tn, 3 * 4);
    }

    #[test]
    fn oversized_target_sets_are_skipped() {
        let labels = tiny_labels();
        let slots = vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])];
        let targets = vec![
            vec!["aa".to_string(), "bb".to_string(), "cc".to_string()],
            vec!["aa".to_string()],
        ];
        let data = ProbeDataset::build(&slots, &targets, &labels, &[0, 1]).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.skipped, 1);
    }

    // Without empty padding (every slot carries a real one-hot label) the
    // probe recovers the target set almost perfectly.
    #[test]
    fn probe_learns_separable_slots() {
        let labels = LabelVocab::build(&[vec!["x".into()], vec!["y".into()], vec!["z".into()]]);
        let d = 6;
        let k = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut slot_sets = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..60 {
            let mut t = Tensor::<f32>::zeros(&[k, d]);
            let mut names = Vec::new();
            for slot in 0..k {
                let which = rng.gen_range(0..3usize);
                names.push(["x", "y", "z"][which].to_string());
                t.data_mut()[slot * d + which] = 1.0;
                t.data_mut()[slot * d + 3] = 0.3; // shared nuisance coordinate
            }
            slot_sets.push(t);
            targets.push(names);
        }
        let idx: Vec<usize> = (0..60).collect();
        let data = ProbeDataset::build(&slot_sets, &targets, &labels, &idx).unwrap();
        let mut model = ProbeModel::new(d, 8, labels.n_classes(), 2);
        let mut cfg = ProbeCfg::new(8);
        cfg.epochs = 80;
        cfg.lr = 5e-3;
        cfg.batch = 8;
        let curve = train_probe(&mut model, &data, &cfg).unwrap();
        assert!(curve.last().unwrap() < &(curve[0] * 0.2), "curve {curve:?}");
        let (m, dump) = evaluate(&model, &data, &labels).unwrap();
        assert!(m.f1 > 0.95, "f1 {}", m.f1);
        assert_eq!(m.tp + m.fp + m.fn_ + m.tn, (k * data.len()) as u64);
        assert_eq!(dump.len(), k * data.len());
    }

    // With empty padding the label imbalance costs recall (the matcher can
    // park a minority label on the pruned slots) but precision stays high
    // and the probe still beats chance by a wide margin.
    #[test]
    fn probe_with_empty_padding_keeps_precision() {
        let labels = LabelVocab::build(&[vec!["x".into()], vec!["y".into()], vec!["z".into()]]);
        let d = 6;
        let k = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut slot_sets = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..60 {
            let mut t = Tensor::<f32>::zeros(&[k, d]);
            let mut names = Vec::new();
            for slot in 0..2 {
                let which = rng.gen_range(0..3usize);
                names.push(["x", "y", "z"][which].to_string());
                t.data_mut()[slot * d + which] = 1.0;
                t.data_mut()[slot * d + 3] = 0.3;
            }
            slot_sets.push(t);
            targets.push(names);
        }
        let idx: Vec<usize> = (0..60).collect();
        let data = ProbeDataset::build(&slot_sets, &targets, &labels, &idx).unwrap();
        let mut model = ProbeModel::new(d, 8, labels.n_classes(), 2);
        let mut cfg = ProbeCfg::new(8);
        cfg.epochs = 120;
        cfg.lr = 5e-3;
        cfg.batch = 8;
        let curve = train_probe(&mut model, &data, &cfg).unwrap();
        assert!(curve.last().unwrap() < &(curve[0] * 0.35), "curve {curve:?}");
        let (m, _) = evaluate(&model, &data, &labels).unwrap();
        assert!(m.precision > 0.9, "precision {}", m.precision);
        assert!(m.f1 > 0.6, "f1 {}", m.f1);
        assert_eq!(m.tp + m.fp + m.fn_ + m.tn, (k * data.len()) as u64);
    }

    // Frozen slots: epoch-mean loss is nonincreasing on a smooth toy run.
    #[test]
    fn probe_loss_curve_nonincreasing() {
        let labels = LabelVocab::build(&[vec!["u".into()], vec!["v".into()]]);
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut slot_sets = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..40 {
            let mut t = Tensor::<f32>::zeros(&[3, d]);
            let which = rng.gen_range(0..2usize);
            t.data_mut()[which] = 1.0;
            slot_sets.push(t);
            targets.push(vec![["u", "v"][which].to_string()]);
        }
        let idx: Vec<usize> = (0..40).collect();
        let data = ProbeDataset::build(&slot_sets, &targets, &labels, &idx).unwrap();
        let mut model = ProbeModel::new(d, 6, labels.n_classes(), 3);
        let mut cfg = ProbeCfg::new(6);
        cfg.epochs = 25;
        cfg.lr = 1e-3;
        cfg.batch = 40;
        let curve = train_probe(&mut model, &data, &cfg).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] <= w[0] * 1.01 + 1e-9, "bump {:?}", w);
        }
        assert!(curve.last().unwrap() < &curve[0]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (train, test) = split_indices(10);
        assert_eq!(test, vec![4, 9]);
        assert_eq!(train.len() + test.len(), 10);
    }

    #[test]
    fn grad_check_probe_loss() {
        use crate::diff::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (k, d, h, c) = (3, 4, 5, 4);
        let points = vec![
            Tensor::<f64>::randn(k, d, 0.8, &mut rng),
            Tensor::<f64>::randn(d, h, 0.5, &mut rng),
            Tensor::<f64>::randn(1, h, 0.2, &mut rng),
            Tensor::<f64>::randn(h, c, 0.5, &mut rng),
            Tensor::<f64>::randn(1, c, 0.2, &mut rng),
        ];
        let targets = vec![2u32, 0, 3];
        let report = grad_check(
            |g, ids| {
                let hnode = g.matmul(ids[0], ids[1])?;
                let hnode = g.add_bias(hnode, ids[2])?;
                let hnode = g.relu(hnode)?;
                let logits = g.matmul(hnode, ids[3])?;
                let logits = g.add_bias(logits, ids[4])?;
                // matching recomputed per evaluation, locally constant at a
                // generic point
                let lt = g.tensor(logits);
                let data: Vec<f64> = lt.data().to_vec();
                let ltf: Tensor<f32> = Tensor::new(lt.dims().to_vec(), data.iter().map(|&v| v as f32).collect()).unwrap();
                let cost = cost_matrix(&ltf, &targets);
                let (assign, _) = hungarian(&cost, k).map_err(|e| crate::diff::DiffError::Domain {
                    op: "probe_loss",
                    detail: e.to_string(),
                })?;
                let matched: Vec<u32> = assign.iter().map(|&j| targets[j]).collect();
                g.cross_entropy(logits, &matched, &[1.0; 3])
            },
            &points,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {:.3e}", report.max_rel_err);
    }
}
