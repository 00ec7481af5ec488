//! Hard-concrete gates over slots with an L0-style penalty.
//!
//! Each slot gets a gate g in [0, 1] obtained by stretching and rectifying a
//! BinaryConcrete sample whose location is log_alpha = m . w. Training draws
//! one reparameterized sample per slot; evaluation uses the deterministic
//! stretched-rectified expectation. The penalty is the closed-form expected
//! number of open gates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{DiffError, Graph, NodeId, Result, Scalar};
use crate::diff::Tensor;

/// Temperature and stretch hyperparameters. The stretch interval is
/// [-epsilon, 1 + epsilon].
#[derive(Debug, Clone, Copy)]
pub struct GateCfg {
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for GateCfg {
    fn default() -> Self {
        GateCfg { beta: 2.0 / 3.0, epsilon: 0.1 }
    }
}

impl GateCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(DiffError::Domain {
                op: "gates",
                detail: format!("beta must lie in (0, 1], got {}", self.beta),
            });
        }
        if self.epsilon <= 0.0 {
            return Err(DiffError::Domain {
                op: "gates",
                detail: format!("epsilon must be positive, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// One reparameterized hard-concrete sample per slot.
    TrainSample,
    /// Deterministic stretched-rectified expectation.
    EvalExpectation,
}

/// Graph nodes produced by one gate application.
pub struct GateNodes {
    /// Gated slots, K x D: row i is g_i * m_i.
    pub gated_slots: NodeId,
    /// Gates, K x 1, values in [0, 1].
    pub gates: NodeId,
    /// Per-slot log alpha, K x 1.
    pub log_alpha: NodeId,
    /// Expected-open-gate penalty, 1 x 1.
    pub penalty: NodeId,
}

/// Stretch `s` over [-eps, 1+eps] as s + eps*(2s - 1), which is algebraically
/// s*(1+2eps) - eps but exact at s = 1/2.
fn stretch<S: Scalar>(g: &mut Graph<S>, s: NodeId, epsilon: f64) -> Result<NodeId> {
    let two_s = g.scale(s, 2.0)?;
    let sym = g.add_scalar(two_s, -1.0)?;
    let shift = g.scale(sym, epsilon)?;
    g.add(s, shift)
}

/// Closed-form expected number of open gates:
/// sum_i sigmoid(log_alpha_i - beta * log(eps / (1 + eps))).
pub fn l0_penalty<S: Scalar>(g: &mut Graph<S>, log_alpha: NodeId, cfg: &GateCfg) -> Result<NodeId> {
    cfg.validate()?;
    let shift = -cfg.beta * (cfg.epsilon / (1.0 + cfg.epsilon)).ln();
    let shifted = g.add_scalar(log_alpha, shift)?;
    let open_prob = g.sigmoid(shifted)?;
    g.sum(open_prob, None)
}

/// Apply gates to `slots` (K x D). `w` is the 1 x D gate weight vector;
/// log_alpha_i = m_i . w. Train mode requires an RNG for the concrete noise.
pub fn gate_forward<S: Scalar>(
    g: &mut Graph<S>,
    slots: NodeId,
    w: NodeId,
    cfg: &GateCfg,
    mode: GateMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<GateNodes> {
    cfg.validate()?;
    let (k, d) = g.shape(slots);
    let (wr, wc) = g.shape(w);
    if (wr, wc) != (1, d) {
        return Err(DiffError::Shape {
            op: "gate_forward",
            detail: format!("w is {}x{}, expected 1x{}", wr, wc, d),
        });
    }
    let wt = g.transpose(w)?;
    let log_alpha = g.matmul(slots, wt)?;

    let gates = match mode {
        GateMode::TrainSample => {
            let rng = rng.ok_or(DiffError::Domain {
                op: "gate_forward",
                detail: "train-sample mode needs an RNG".into(),
            })?;
            // u in (0,1), kept away from the endpoints so logit(u) is finite
            let logit_u: Vec<S> = (0..k)
                .map(|_| {
                    let u: f64 = rng.gen_range(1e-7..1.0 - 1e-7);
                    S::of_f64((u.ln() - (1.0 - u).ln()) as f64)
                })
                .collect();
            let noise = g.constant(&Tensor::col(logit_u))?;
            let pre = g.add(log_alpha, noise)?;
            let scaled = g.scale(pre, 1.0 / cfg.beta)?;
            let s = g.sigmoid(scaled)?;
            let stretched = stretch(g, s, cfg.epsilon)?;
            g.clamp(stretched, 0.0, 1.0)?
        }
        GateMode::EvalExpectation => {
            let p = g.sigmoid(log_alpha)?;
            let stretched = stretch(g, p, cfg.epsilon)?;
            g.clamp(stretched, 0.0, 1.0)?
        }
    };

    let gate_cols = g.broadcast(gates, 1, d)?;
    let gated_slots = g.mul(slots, gate_cols)?;
    let penalty = l0_penalty(g, log_alpha, cfg)?;
    Ok(GateNodes { gated_slots, gates, log_alpha, penalty })
}

/// Scalar eval-mode gate value for a given log alpha.
pub fn eval_gate(log_alpha: f64, cfg: &GateCfg) -> f64 {
    let p = crate::diff::sigmoid(log_alpha);
    let stretched = p + cfg.epsilon * (2.0 * p - 1.0);
    stretched.clamp(0.0, 1.0)
}

/// Scalar closed-form probability that a gate is open.
pub fn open_probability(log_alpha: f64, cfg: &GateCfg) -> f64 {
    crate::diff::sigmoid(log_alpha - cfg.beta * (cfg.epsilon / (1.0 + cfg.epsilon)).ln())
}

/// One raw hard-concrete sample, outside the graph (Monte-Carlo oracles).
pub fn sample_gate(log_alpha: f64, cfg: &GateCfg, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(1e-12..1.0 - 1e-12);
    let s = crate::diff::sigmoid((u.ln() - (1.0 - u).ln() + log_alpha) / cfg.beta);
    let stretched = s + cfg.epsilon * (2.0 * s - 1.0);
    stretched.clamp(0.0, 1.0)
}
