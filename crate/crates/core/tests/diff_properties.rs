//! Randomized program-level checks of the differentiation substrate:
//! programs composed from the primitive catalog must match central finite
//! differences, and softmax must stay row-stochastic everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotmorph::diff::{grad_check, gru_cell, DiffError, Graph, GruParams, NodeId, Tensor};

/// Operand: either a program input (leaf index) or an earlier step's output.
#[derive(Debug, Clone, Copy)]
enum Ref {
    Leaf(usize),
    Step(usize),
}

#[derive(Debug, Clone)]
enum Step {
    Add(Ref, Ref),
    Sub(Ref, Ref),
    Mul(Ref, Ref),
    DivSafe(Ref, Ref),
    Scale(Ref, f64),
    AddScalar(Ref, f64),
    ExpSafe(Ref),
    LnSafe(Ref),
    Tanh(Ref),
    Sigmoid(Ref),
    Relu(Ref),
    Clamp(Ref),
    Matmul(Ref, Ref),
    Transpose(Ref),
    Softmax(Ref, usize),
    LayerNorm { x: Ref, gamma: usize, beta: usize },
    Embedding { table: usize, ids: Vec<u32> },
    Concat(usize, Ref, Ref),
    Slice { x: Ref, axis: usize, start: usize, len: usize },
    Sum(Ref, Option<usize>),
    Mean(Ref, Option<usize>),
    Broadcast { x: Ref, axis: usize, n: usize },
    CrossEntropy { x: Ref, targets: Vec<u32> },
    Gru { h: Ref, x: Ref, leaf_base: usize },
}

#[derive(Debug)]
struct Plan {
    leaves: Vec<Tensor<f64>>,
    steps: Vec<Step>,
}

fn rand_shape(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let dims = [1usize, 2, 3, 4];
    (dims[rng.gen_range(0..4)], dims[rng.gen_range(0..4)])
}

/// Build a random program of up to `max_ops` sampled catalog primitives.
fn random_plan(rng: &mut ChaCha8Rng, max_ops: usize) -> Plan {
    let mut leaves: Vec<Tensor<f64>> = Vec::new();
    let mut shapes: Vec<(usize, usize)> = Vec::new();
    for _ in 0..3 {
        let (r, c) = rand_shape(rng);
        leaves.push(Tensor::randn(r, c, 0.8, rng));
        shapes.push((r, c));
    }
    let mut steps = Vec::new();
    let n_ops = rng.gen_range(1..=max_ops);
    'outer: for _ in 0..n_ops {
        for _attempt in 0..40 {
            let pick = |rng: &mut ChaCha8Rng, shapes: &[(usize, usize)]| rng.gen_range(0..shapes.len());
            let kind = rng.gen_range(0..22u32);
            let step = match kind {
                0..=2 => {
                    let a = pick(rng, &shapes);
                    let b = pick(rng, &shapes);
                    if shapes[a] != shapes[b] {
                        continue;
                    }
                    match kind {
                        0 => Step::Add(a, b),
                        1 => Step::Sub(a, b),
                        _ => Step::Mul(a, b),
                    }
                }
                3 => {
                    let a = pick(rng, &shapes);
                    let b = pick(rng, &shapes);
                    if shapes[a] != shapes[b] {
                        continue;
                    }
                    Step::DivSafe(a, b)
                }
                4 => Step::Scale(pick(rng, &shapes), rng.gen_range(-2.0..2.0)),
                5 => Step::AddScalar(pick(rng, &shapes), rng.gen_range(-1.0..1.0)),
                6 => Step::ExpSafe(pick(rng, &shapes)),
                7 => Step::LnSafe(pick(rng, &shapes)),
                8 => Step::Tanh(pick(rng, &shapes)),
                9 => Step::Sigmoid(pick(rng, &shapes)),
                10 => Step::Relu(pick(rng, &shapes)),
                11 => Step::Clamp(pick(rng, &shapes)),
                12 => {
                    let a = pick(rng, &shapes);
                    let b = pick(rng, &shapes);
                    if shapes[a].1 != shapes[b].0 {
                        continue;
                    }
                    Step::Matmul(a, b)
                }
                13 => Step::Transpose(pick(rng, &shapes)),
                14 => Step::Softmax(pick(rng, &shapes), rng.gen_range(0..2)),
                15 => {
                    let x = pick(rng, &shapes);
                    let c = shapes[x].1;
                    if c < 2 {
                        continue;
                    }
                    let mut gamma = Tensor::randn(1, c, 0.2, rng);
                    for v in gamma.data_mut() {
                        *v += 1.0;
                    }
                    leaves.push(gamma);
                    shapes.push((1, c));
                    leaves.push(Tensor::randn(1, c, 0.3, rng));
                    shapes.push((1, c));
                    Step::LayerNorm { x, gamma: leaves.len() - 2, beta: leaves.len() - 1 }
                }
                16 => {
                    let rows = 4usize;
                    let d = rng.gen_range(2..4usize);
                    leaves.push(Tensor::randn(rows, d, 0.8, rng));
                    shapes.push((rows, d));
                    let n = rng.gen_range(1..4usize);
                    let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..rows as u32)).collect();
                    Step::Embedding { table: leaves.len() - 1, ids }
                }
                17 => {
                    let a = pick(rng, &shapes);
                    let b = pick(rng, &shapes);
                    let axis = rng.gen_range(0..2usize);
                    let ok = if axis == 0 {
                        shapes[a].1 == shapes[b].1
                    } else {
                        shapes[a].0 == shapes[b].0
                    };
                    if !ok {
                        continue;
                    }
                    Step::Concat(axis, a, b)
                }
                18 => {
                    let x = pick(rng, &shapes);
                    let axis = rng.gen_range(0..2usize);
                    let extent = if axis == 0 { shapes[x].0 } else { shapes[x].1 };
                    if extent < 2 {
                        continue;
                    }
                    let len = rng.gen_range(1..extent);
                    let start = rng.gen_range(0..=extent - len);
                    Step::Slice { x, axis, start, len }
                }
                19 => {
                    let x = pick(rng, &shapes);
                    let axis = [None, Some(0), Some(1)][rng.gen_range(0..3usize)];
                    if rng.gen_bool(0.5) {
                        Step::Sum(x, axis)
                    } else {
                        Step::Mean(x, axis)
                    }
                }
                20 => {
                    let candidates: Vec<usize> = shapes
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| s.0 == 1 || s.1 == 1)
                        .map(|(i, _)| i)
                        .collect();
                    if candidates.is_empty() {
                        continue;
                    }
                    let x = candidates[rng.gen_range(0..candidates.len())];
                    let n = rng.gen_range(2..4usize);
                    // row vectors broadcast down, column vectors across
                    let axis = if shapes[x].0 == 1 { 0 } else { 1 };
                    Step::Broadcast { x, axis, n }
                }
                _ => {
                    let x = pick(rng, &shapes);
                    let (r, c) = shapes[x];
                    if c < 2 {
                        continue;
                    }
                    let targets: Vec<u32> = (0..r).map(|_| rng.gen_range(0..c as u32)).collect();
                    Step::CrossEntropy { x, targets }
                }
            };
            let out_shape = step_shape(&step, &shapes);
            shapes.push(out_shape);
            steps.push(step);
            continue 'outer;
        }
        break;
    }
    // occasionally test the GRU cell as the program body
    if steps.is_empty() || rng.gen_bool(0.05) {
        let d = rng.gen_range(2..4usize);
        let r = rng.gen_range(1..3usize);
        let h = leaves.len();
        leaves.push(Tensor::randn(r, d, 0.8, rng));
        shapes.push((r, d));
        let x = leaves.len();
        leaves.push(Tensor::randn(r, d, 0.8, rng));
        shapes.push((r, d));
        let leaf_base = leaves.len();
        for _ in 0..6 {
            leaves.push(Tensor::randn(d, d, 0.5, rng));
            shapes.push((d, d));
        }
        for _ in 0..3 {
            leaves.push(Tensor::randn(1, d, 0.3, rng));
            shapes.push((1, d));
        }
        steps.push(Step::Gru { h, x, leaf_base });
    }
    Plan { leaves, steps }
}

fn step_shape(step: &Step, shapes: &[(usize, usize)]) -> (usize, usize) {
    match step {
        Step::Add(a, _)
        | Step::Sub(a, _)
        | Step::Mul(a, _)
        | Step::DivSafe(a, _)
        | Step::Scale(a, _)
        | Step::AddScalar(a, _)
        | Step::ExpSafe(a)
        | Step::LnSafe(a)
        | Step::Tanh(a)
        | Step::Sigmoid(a)
        | Step::Relu(a)
        | Step::Clamp(a)
        | Step::Softmax(a, _) => shapes[*a],
        Step::Matmul(a, b) => (shapes[*a].0, shapes[*b].1),
        Step::Transpose(a) => (shapes[*a].1, shapes[*a].0),
        Step::LayerNorm { x, .. } => shapes[*x],
        Step::Embedding { table, ids } => (ids.len(), shapes[*table].1),
        Step::Concat(axis, a, b) => {
            if *axis == 0 {
                (shapes[*a].0 + shapes[*b].0, shapes[*a].1)
            } else {
                (shapes[*a].0, shapes[*a].1 + shapes[*b].1)
            }
        }
        Step::Slice { x, axis, len, .. } => {
            if *axis == 0 {
                (*len, shapes[*x].1)
            } else {
                (shapes[*x].0, *len)
            }
        }
        Step::Sum(x, axis) | Step::Mean(x, axis) => match axis {
            None => (1, 1),
            Some(0) => (1, shapes[*x].1),
            Some(_) => (shapes[*x].0, 1),
        },
        Step::Broadcast { x, axis, n } => {
            if *axis == 0 {
                (*n, shapes[*x].1)
            } else {
                (shapes[*x].0, *n)
            }
        }
        Step::CrossEntropy { .. } => (1, 1),
        Step::Gru { h, .. } => shapes[*h],
    }
}

fn replay(plan: &Plan, g: &mut Graph<f64>, leaf_ids: &[NodeId]) -> Result<NodeId, DiffError> {
    let mut nodes: Vec<NodeId> = leaf_ids.to_vec();
    for step in &plan.steps {
        let id = match step {
            Step::Add(a, b) => g.add(nodes[*a], nodes[*b])?,
            Step::Sub(a, b) => g.sub(nodes[*a], nodes[*b])?,
            Step::Mul(a, b) => g.mul(nodes[*a], nodes[*b])?,
            Step::DivSafe(a, b) => {
                let s = g.sigmoid(nodes[*b])?;
                let denom = g.add_scalar(s, 0.5)?;
                g.div(nodes[*a], denom)?
            }
            Step::Scale(a, c) => g.scale(nodes[*a], *c)?,
            Step::AddScalar(a, c) => g.add_scalar(nodes[*a], *c)?,
            Step::ExpSafe(a) => {
                let t = g.tanh(nodes[*a])?;
                g.exp(t)?
            }
            Step::LnSafe(a) => {
                let s = g.sigmoid(nodes[*a])?;
                let pos = g.add_scalar(s, 0.5)?;
                g.ln(pos)?
            }
            Step::Tanh(a) => g.tanh(nodes[*a])?,
            Step::Sigmoid(a) => g.sigmoid(nodes[*a])?,
            Step::Relu(a) => g.relu(nodes[*a])?,
            Step::Clamp(a) => g.clamp(nodes[*a], -5.0, 5.0)?,
            Step::Matmul(a, b) => g.matmul(nodes[*a], nodes[*b])?,
            Step::Transpose(a) => g.transpose(nodes[*a])?,
            Step::Softmax(a, axis) => g.softmax(nodes[*a], *axis)?,
            Step::LayerNorm { x, gamma, beta } => {
                g.layer_norm(nodes[*x], leaf_ids[*gamma], leaf_ids[*beta], 1e-5)?
            }
            Step::Embedding { table, ids } => g.embedding(leaf_ids[*table], ids)?,
            Step::Concat(axis, a, b) => g.concat(*axis, &[nodes[*a], nodes[*b]])?,
            Step::Slice { x, axis, start, len } => g.slice(nodes[*x], *axis, *start, *len)?,
            Step::Sum(x, axis) => g.sum(nodes[*x], *axis)?,
            Step::Mean(x, axis) => g.mean(nodes[*x], *axis)?,
            Step::Broadcast { x, axis, n } => g.broadcast(nodes[*x], *axis, *n)?,
            Step::CrossEntropy { x, targets } => {
                let w = vec![1.0; targets.len()];
                g.cross_entropy(nodes[*x], targets, &w)?
            }
            Step::Gru { h, x, leaf_base } => {
                let p = GruParams {
                    w_reset: leaf_ids[*leaf_base],
                    u_reset: leaf_ids[*leaf_base + 1],
                    w_update: leaf_ids[*leaf_base + 2],
                    u_update: leaf_ids[*leaf_base + 3],
                    w_cand: leaf_ids[*leaf_base + 4],
                    u_cand: leaf_ids[*leaf_base + 5],
                    b_reset: leaf_ids[*leaf_base + 6],
                    b_update: leaf_ids[*leaf_base + 7],
                    b_cand: leaf_ids[*leaf_base + 8],
                };
                gru_cell(g, nodes[*h], nodes[*x], &p)?
            }
        };
        nodes.push(id);
    }
    let last = *nodes.last().expect("plan has nodes");
    if g.shape(last) == (1, 1) {
        Ok(last)
    } else {
        // keep the scalarization nonlinear so matmul-like ops see
        // non-uniform output gradients
        let t = g.tanh(last)?;
        g.sum(t, None)
    }
}

// Catalog invariant: analytic gradients of random small programs match
// central finite differences at 64-bit.
#[test]
fn random_programs_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240917);
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < 1000 {
        attempts += 1;
        assert!(attempts < 4000, "too many rejected programs");
        let plan = random_plan(&mut rng, 6);
        let result = grad_check(
            |g, ids| replay(&plan, g, ids),
            &plan.leaves,
            1e-6,
            1e-4,
        );
        match result {
            Ok(report) => {
                assert!(
                    report.passed,
                    "program failed: max rel err {:.3e} at {:?}\nplan: {:?}",
                    report.max_rel_err, report.worst, plan.steps
                );
                checked += 1;
            }
            // evaluation too close to a relu/clamp kink: rejected by design
            Err(DiffError::NonDifferentiable(_)) => continue,
            Err(e) => panic!("program construction failed: {e}\nplan: {:?}", plan.steps),
        }
    }
}

// Softmax output sums to 1 along the chosen axis and lies in (0, 1) for all
// finite logits, including extreme magnitudes.
#[test]
fn softmax_is_stochastic_under_extreme_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let (r, c) = (rng.gen_range(1..5usize), rng.gen_range(1..6usize));
        let scale = [0.1, 1.0, 30.0, 500.0][case % 4];
        let t = Tensor::<f64>::randn(r, c, scale, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(&t, false).unwrap();
        for axis in [0usize, 1] {
            let y = g.softmax(x, axis).unwrap();
            let d = g.data(y);
            assert!(d.iter().all(|&v| v > 0.0 && v < 1.0 + 1e-12), "case {case}");
            let (rr, cc) = g.shape(y);
            if axis == 1 {
                for i in 0..rr {
                    let s: f64 = d[i * cc..(i + 1) * cc].iter().sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                }
            } else {
                for j in 0..cc {
                    let s: f64 = (0..rr).map(|i| d[i * cc + j]).sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
