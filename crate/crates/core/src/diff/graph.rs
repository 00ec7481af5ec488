//! Recorded-op tape with reverse-mode gradients.
//!
//! Every forward op appends one node; `backward` walks the tape once in
//! reverse execution order. All reductions run sequentially in a fixed order,
//! so a single-threaded run is bitwise deterministic.

use super::{sigmoid, DiffError, Result, Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, S),
    AddScalar(NodeId, S),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Clamp(NodeId, S, S),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Embedding { table: NodeId, ids: Vec<u32> },
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    Sum { x: NodeId, axis: Option<usize> },
    Broadcast { x: NodeId, axis: usize, n: usize },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, weights: Vec<S> },
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    rows: usize,
    cols: usize,
    data: Vec<S>,
    rg: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    kink_margin: Option<f64>,
}

/// Per-node gradient buffers produced by a backward pass.
pub struct Gradients<S> {
    inner: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the seeded output with respect to `id`, if any flowed.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.inner.get(id.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

// C[m x n] += A[m x k] . B[k x n], accumulating into `out`.
fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

// C[k x n] += A^T . G for A[m x k], G[m x n].
fn matmul_tn_acc<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * grow[j];
            }
        }
    }
}

fn transpose_raw<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), kink_margin: None }
    }

    /// A graph that rejects forward evaluation close to non-differentiable
    /// points (relu/clamp kinks), used by the gradient checker.
    pub fn with_kink_guard(margin: f64) -> Self {
        Graph { nodes: Vec::new(), kink_margin: Some(margin) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, rows: usize, cols: usize, data: Vec<S>, rg: bool) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node { op, rows, cols, data, rg });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node<S> {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.node(id).data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<S> {
        let n = self.node(id);
        Tensor::new(vec![n.rows, n.cols], n.data.clone()).expect("node shape consistent")
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).rg
    }

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Result<NodeId> {
        let (r, c) = t.shape2d()?;
        Ok(self.push(Op::Leaf, r, c, t.data().to_vec(), requires_grad))
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Result<NodeId> {
        self.leaf(t, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, 1, 1, vec![S::of_f64(v)], false)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) != (br, bc) {
            return Err(shape_err(op, format!("{}x{} vs {}x{}", ar, ac, br, bc)));
        }
        Ok((ar, ac))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Add(a, b), r, c, data, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Sub(a, b), r, c, data, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Mul(a, b), r, c, data, rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape("div", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Div(a, b), r, c, data, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let f = S::of_f64(factor);
        let data = self.data(a).iter().map(|&x| x * f).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Scale(a, f), r, c, data, rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let (r, cc) = self.shape(a);
        let k = S::of_f64(c);
        let data = self.data(a).iter().map(|&x| x + k).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::AddScalar(a, k), r, cc, data, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data = self.data(a).iter().map(|&x| x.exp()).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Exp(a), r, c, data, rg))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = self.data(a).iter().find(|v| **v <= S::zero()) {
            return Err(DiffError::Domain {
                op: "ln",
                detail: format!("input {:?} is not strictly positive", bad),
            });
        }
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Ln(a), r, c, data, rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Tanh(a), r, c, data, rg))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Sigmoid(a), r, c, data, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if let Some(m) = self.kink_margin {
            if let Some(&bad) = self.data(a).iter().find(|v| v.as_f64().abs() < m) {
                return Err(DiffError::NonDifferentiable(format!(
                    "relu input {:?} is within {} of the kink at 0",
                    bad, m
                )));
            }
        }
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Relu(a), r, c, data, rg))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(DiffError::Domain {
                op: "clamp",
                detail: format!("lo {} must be below hi {}", lo, hi),
            });
        }
        let (r, c) = self.shape(a);
        if let Some(m) = self.kink_margin {
            if let Some(&bad) = self
                .data(a)
                .iter()
                .find(|v| (v.as_f64() - lo).abs() < m || (v.as_f64() - hi).abs() < m)
            {
                return Err(DiffError::NonDifferentiable(format!(
                    "clamp input {:?} is within {} of a bound ({}, {})",
                    bad, m, lo, hi
                )));
            }
        }
        let (l, h) = (S::of_f64(lo), S::of_f64(hi));
        let data = self
            .data(a)
            .iter()
            .map(|&x| if x < l { l } else if x > h { h } else { x })
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Clamp(a, l, h), r, c, data, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{}x{} . {}x{}", m, k, k2, n)));
        }
        let mut data = vec![S::zero(); m * n];
        matmul_acc(self.data(a), self.data(b), m, k, n, &mut data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Op::Matmul(a, b), m, n, data, rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let data = transpose_raw(self.data(a), r, c);
        let rg = self.requires_grad(a);
        Ok(self.push(Op::Transpose(a), c, r, data, rg))
    }

    /// Softmax normalized over `axis`: axis 1 normalizes each row, axis 0
    /// each column.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if axis > 1 {
            return Err(shape_err("softmax", format!("axis {} out of range", axis)));
        }
        let src = self.data(x);
        let mut data = vec![S::zero(); r * c];
        if axis == 1 {
            for i in 0..r {
                let row = &src[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    data[i * c + j] = e;
                    z = z + e;
                }
                for j in 0..c {
                    data[i * c + j] = data[i * c + j] / z;
                }
            }
        } else {
            for j in 0..c {
                let mut m = S::neg_infinity();
                for i in 0..r {
                    m = m.max(src[i * c + j]);
                }
                let mut z = S::zero();
                for i in 0..r {
                    let e = (src[i * c + j] - m).exp();
                    data[i * c + j] = e;
                    z = z + e;
                }
                for i in 0..r {
                    data[i * c + j] = data[i * c + j] / z;
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Softmax { x, axis }, r, c, data, rg))
    }

    /// Per-row layer normalization with affine parameters (`gamma`, `beta`
    /// are 1 x cols).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (gr, gc) = self.shape(id);
            if (gr, gc) != (1, c) {
                return Err(shape_err(
                    "layer_norm",
                    format!("{} is {}x{}, expected 1x{}", name, gr, gc, c),
                ));
            }
        }
        if c == 0 {
            return Err(DiffError::Empty("layer_norm over zero columns"));
        }
        let nf = S::of_f64(c as f64);
        let epss = S::of_f64(eps);
        let mut data = vec![S::zero(); r * c];
        {
            let src = self.data(x);
            let g = self.data(gamma).to_vec();
            let b = self.data(beta).to_vec();
            for i in 0..r {
                let row = &src[i * c..(i + 1) * c];
                let mut mean = S::zero();
                for &v in row {
                    mean = mean + v;
                }
                mean = mean / nf;
                let mut var = S::zero();
                for &v in row {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / nf;
                let inv = S::one() / (var + epss).sqrt();
                for j in 0..c {
                    let xh = (row[j] - mean) * inv;
                    data[i * c + j] = g[j] * xh + b[j];
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, r, c, data, rg))
    }

    /// Row lookup: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(DiffError::Empty("embedding with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(shape_err(
                "embedding",
                format!("id {} out of range for table with {} rows", bad, v),
            ));
        }
        let mut data = vec![S::zero(); ids.len() * d];
        let src = self.data(table);
        for (i, &id) in ids.iter().enumerate() {
            let row = &src[id as usize * d..(id as usize + 1) * d];
            data[i * d..(i + 1) * d].copy_from_slice(row);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, ids.len(), d, data, rg))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(DiffError::Empty("concat of zero parts"));
        }
        if axis > 1 {
            return Err(shape_err("concat", format!("axis {} out of range", axis)));
        }
        let (r0, c0) = self.shape(parts[0]);
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.shape(p);
            if axis == 0 {
                if c != c0 {
                    return Err(shape_err("concat", format!("cols {} vs {}", c, c0)));
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(shape_err("concat", format!("rows {} vs {}", r, r0)));
                }
                cols += c;
            }
        }
        let mut data = vec![S::zero(); rows * cols];
        if axis == 0 {
            let mut off = 0;
            for &p in parts {
                let len = self.node(p).data.len();
                data[off..off + len].copy_from_slice(self.data(p));
                off += len;
            }
        } else {
            let mut coff = 0;
            for &p in parts {
                let (_, pc) = self.shape(p);
                let src = self.data(p);
                for i in 0..rows {
                    data[i * cols + coff..i * cols + coff + pc]
                        .copy_from_slice(&src[i * pc..(i + 1) * pc]);
                }
                coff += pc;
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Op::Concat { axis, parts: parts.to_vec() }, rows, cols, data, rg))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if axis > 1 {
            return Err(shape_err("slice", format!("axis {} out of range", axis)));
        }
        let extent = if axis == 0 { r } else { c };
        if start + len > extent || len == 0 {
            return Err(shape_err(
                "slice",
                format!("range {}..{} out of axis extent {}", start, start + len, extent),
            ));
        }
        let (rows, cols) = if axis == 0 { (len, c) } else { (r, len) };
        let mut data = vec![S::zero(); rows * cols];
        let src = self.data(x);
        if axis == 0 {
            data.copy_from_slice(&src[start * c..(start + len) * c]);
        } else {
            for i in 0..r {
                data[i * len..(i + 1) * len]
                    .copy_from_slice(&src[i * c + start..i * c + start + len]);
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Slice { x, axis, start, len }, rows, cols, data, rg))
    }

    /// Sum along an axis (0: over rows giving 1 x cols, 1: over cols giving
    /// rows x 1) or over everything (`None`, giving 1x1).
    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let src = self.data(x);
        let (rows, cols, data) = match axis {
            None => {
                let mut acc = S::zero();
                for &v in src {
                    acc = acc + v;
                }
                (1, 1, vec![acc])
            }
            Some(0) => {
                let mut out = vec![S::zero(); c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] = out[j] + src[i * c + j];
                    }
                }
                (1, c, out)
            }
            Some(1) => {
                let mut out = vec![S::zero(); r];
                for i in 0..r {
                    let mut acc = S::zero();
                    for j in 0..c {
                        acc = acc + src[i * c + j];
                    }
                    out[i] = acc;
                }
                (r, 1, out)
            }
            Some(a) => return Err(shape_err("sum", format!("axis {} out of range", a))),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Sum { x, axis }, rows, cols, data, rg))
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let denom = match axis {
            None => r * c,
            Some(0) => r,
            Some(1) => c,
            Some(a) => return Err(shape_err("mean", format!("axis {} out of range", a))),
        };
        if denom == 0 {
            return Err(DiffError::Empty("mean over zero elements"));
        }
        let s = self.sum(x, axis)?;
        self.scale(s, 1.0 / denom as f64)
    }

    /// Repeat a row vector down `n` rows (axis 0) or a column vector across
    /// `n` columns (axis 1).
    pub fn broadcast(&mut self, x: NodeId, axis: usize, n: usize) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if n == 0 {
            return Err(DiffError::Empty("broadcast to zero extent"));
        }
        let src = self.data(x);
        let (rows, cols, data) = match axis {
            0 => {
                if r != 1 {
                    return Err(shape_err("broadcast", format!("axis 0 needs 1x{}, got {}x{}", c, r, c)));
                }
                let mut out = vec![S::zero(); n * c];
                for i in 0..n {
                    out[i * c..(i + 1) * c].copy_from_slice(src);
                }
                (n, c, out)
            }
            1 => {
                if c != 1 {
                    return Err(shape_err("broadcast", format!("axis 1 needs {}x1, got {}x{}", r, r, c)));
                }
                let mut out = vec![S::zero(); r * n];
                for i in 0..r {
                    for j in 0..n {
                        out[i * n + j] = src[i];
                    }
                }
                (r, n, out)
            }
            a => return Err(shape_err("broadcast", format!("axis {} out of range", a))),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(Op::Broadcast { x, axis, n }, rows, cols, data, rg))
    }

    /// x + row-vector bias, broadcast down all rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape(x);
        let b = self.broadcast(bias, 0, r)?;
        self.add(x, b)
    }

    /// Weighted sum of per-row softmax cross-entropies against integer
    /// targets: out = sum_i w_i * (logsumexp(z_i) - z_i[t_i]). Returns 1x1.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], weights: &[f64]) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || weights.len() != r {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows vs {} targets / {} weights", r, targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(shape_err(
                "cross_entropy",
                format!("target {} out of range for {} classes", bad, c),
            ));
        }
        let src = self.data(logits);
        let mut acc = S::zero();
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for &v in row {
                z = z + (v - m).exp();
            }
            let lse = m + z.ln();
            let nll = lse - row[targets[i] as usize];
            acc = acc + S::of_f64(weights[i]) * nll;
        }
        let rg = self.requires_grad(logits);
        let w: Vec<S> = weights.iter().map(|&x| S::of_f64(x)).collect();
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: w },
            1,
            1,
            vec![acc],
            rg,
        ))
    }

    /// Reverse pass from `out`, seeded with `seed` (defaults to ones).
    /// Visits every recorded op at most once, in reverse execution order.
    pub fn backward(&self, out: NodeId, seed: Option<&Tensor<S>>) -> Result<Gradients<S>> {
        let (or, oc) = self.shape(out);
        let seed_data = match seed {
            Some(t) => {
                let (sr, sc) = t.shape2d()?;
                if (sr, sc) != (or, oc) {
                    return Err(shape_err(
                        "backward",
                        format!("seed {}x{} vs output {}x{}", sr, sc, or, oc),
                    ));
                }
                t.data().to_vec()
            }
            None => vec![S::one(); or * oc],
        };
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed_data);

        for i in (0..=out.0).rev() {
            if grads[i].is_none() || !self.nodes[i].rg {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.backprop_node(i, &g, &mut grads);
            // keep leaf gradients addressable after the pass
            grads[i] = Some(g);
        }
        Ok(Gradients { inner: grads })
    }

    fn acc_into(&self, grads: &mut Vec<Option<Vec<S>>>, id: NodeId, f: impl FnOnce(&mut [S])) {
        if !self.nodes[id.0].rg {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![S::zero(); self.nodes[id.0].data.len()]);
        }
        f(slot.as_mut().expect("just initialized"));
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut Vec<Option<Vec<S>>>) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_into(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc_into(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
                self.acc_into(grads, *b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let bd = self.data(*b);
                self.acc_into(grads, *a, |ga| {
                    for ((d, &s), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d = *d + s * bv;
                    }
                });
                let ad = self.data(*a);
                self.acc_into(grads, *b, |gb| {
                    for ((d, &s), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *d = *d + s * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                self.acc_into(grads, *a, |ga| {
                    for ((d, &s), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d = *d + s / bv;
                    }
                });
                let out = &node.data;
                self.acc_into(grads, *b, |gb| {
                    for (j, d) in gb.iter_mut().enumerate() {
                        *d = *d - g[j] * out[j] / bd[j];
                    }
                });
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.acc_into(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s * f;
                    }
                });
            }
            Op::AddScalar(a, _) => {
                self.acc_into(grads, *a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.data;
                self.acc_into(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[j] * out[j];
                    }
                });
            }
            Op::Ln(a) => {
                let ad = self.data(*a);
                self.acc_into(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[j] / ad[j];
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.data;
                self.acc_into(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[j] * (S::one() - out[j] * out[j]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.data;
                self.acc_into(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[j] * out[j] * (S::one() - out[j]);
                    }
                });
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                self.acc_into(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        if ad[j] > S::zero() {
                            *d = *d + g[j];
                        }
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let ad = self.data(*a);
                self.acc_into(grads, *a, |ga| {
                    for (j, d) in ga.iter_mut().enumerate() {
                        if ad[j] > lo && ad[j] < hi {
                            *d = *d + g[j];
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                // dA += G . B^T
                let bt = transpose_raw(self.data(*b), k, n);
                self.acc_into(grads, *a, |ga| {
                    matmul_acc(g, &bt, m, n, k, ga);
                });
                // dB += A^T . G
                let ad = self.data(*a);
                self.acc_into(grads, *b, |gb| {
                    matmul_tn_acc(ad, g, m, k, n, gb);
                });
            }
            Op::Transpose(a) => {
                // out is rows x cols; input is cols x rows
                self.acc_into(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] = ga[c * rows + r] + g[r * cols + c];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.data;
                if *axis == 1 {
                    self.acc_into(grads, *x, |gx| {
                        for i in 0..rows {
                            let yr = &y[i * cols..(i + 1) * cols];
                            let gr = &g[i * cols..(i + 1) * cols];
                            let mut dot = S::zero();
                            for j in 0..cols {
                                dot = dot + gr[j] * yr[j];
                            }
                            let out = &mut gx[i * cols..(i + 1) * cols];
                            for j in 0..cols {
                                out[j] = out[j] + yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                } else {
                    self.acc_into(grads, *x, |gx| {
                        for j in 0..cols {
                            let mut dot = S::zero();
                            for i in 0..rows {
                                dot = dot + g[i * cols + j] * y[i * cols + j];
                            }
                            for i in 0..rows {
                                let idx = i * cols + j;
                                gx[idx] = gx[idx] + y[idx] * (g[idx] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let nf = S::of_f64(cols as f64);
                let epss = S::of_f64(*eps);
                // recompute per-row statistics
                let mut means = vec![S::zero(); rows];
                let mut invs = vec![S::zero(); rows];
                for i in 0..rows {
                    let row = &xd[i * cols..(i + 1) * cols];
                    let mut mean = S::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / nf;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / nf;
                    means[i] = mean;
                    invs[i] = S::one() / (var + epss).sqrt();
                }
                self.acc_into(grads, *beta, |gb| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gb[j] = gb[j] + g[i * cols + j];
                        }
                    }
                });
                self.acc_into(grads, *gamma, |gg| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let xh = (xd[i * cols + j] - means[i]) * invs[i];
                            gg[j] = gg[j] + g[i * cols + j] * xh;
                        }
                    }
                });
                self.acc_into(grads, *x, |gx| {
                    for i in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        let mut ghat = vec![S::zero(); cols];
                        for j in 0..cols {
                            let gh = g[i * cols + j] * gd[j];
                            let xh = (xd[i * cols + j] - means[i]) * invs[i];
                            ghat[j] = gh;
                            m1 = m1 + gh;
                            m2 = m2 + gh * xh;
                        }
                        m1 = m1 / nf;
                        m2 = m2 / nf;
                        for j in 0..cols {
                            let xh = (xd[i * cols + j] - means[i]) * invs[i];
                            gx[i * cols + j] =
                                gx[i * cols + j] + invs[i] * (ghat[j] - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                self.acc_into(grads, *table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = id as usize * cols;
                        for j in 0..cols {
                            gt[dst + j] = gt[dst + j] + g[i * cols + j];
                        }
                    }
                });
            }
            Op::Concat { axis, parts } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        let window = &g[off..off + len];
                        self.acc_into(grads, p, |gp| {
                            for (d, &s) in gp.iter_mut().zip(window) {
                                *d = *d + s;
                            }
                        });
                        off += len;
                    }
                } else {
                    let mut coff = 0;
                    for &p in parts {
                        let (_, pc) = self.shape(p);
                        self.acc_into(grads, p, |gp| {
                            for i in 0..rows {
                                for j in 0..pc {
                                    gp[i * pc + j] = gp[i * pc + j] + g[i * cols + coff + j];
                                }
                            }
                        });
                        coff += pc;
                    }
                }
            }
            Op::Slice { x, axis, start, len } => {
                let (_, xc) = self.shape(*x);
                if *axis == 0 {
                    self.acc_into(grads, *x, |gx| {
                        let dst = &mut gx[start * xc..(start + len) * xc];
                        for (d, &s) in dst.iter_mut().zip(g) {
                            *d = *d + s;
                        }
                    });
                } else {
                    self.acc_into(grads, *x, |gx| {
                        for i in 0..rows {
                            for j in 0..*len {
                                let idx = i * xc + start + j;
                                gx[idx] = gx[idx] + g[i * cols + j];
                            }
                        }
                    });
                }
            }
            Op::Sum { x, axis } => {
                let (xr, xc) = self.shape(*x);
                match axis {
                    None => {
                        let s = g[0];
                        self.acc_into(grads, *x, |gx| {
                            for d in gx.iter_mut() {
                                *d = *d + s;
                            }
                        });
                    }
                    Some(0) => {
                        self.acc_into(grads, *x, |gx| {
                            for i in 0..xr {
                                for j in 0..xc {
                                    gx[i * xc + j] = gx[i * xc + j] + g[j];
                                }
                            }
                        });
                    }
                    Some(_) => {
                        self.acc_into(grads, *x, |gx| {
                            for i in 0..xr {
                                for j in 0..xc {
                                    gx[i * xc + j] = gx[i * xc + j] + g[i];
                                }
                            }
                        });
                    }
                }
            }
            Op::Broadcast { x, axis, n } => {
                let n = *n;
                if *axis == 0 {
                    self.acc_into(grads, *x, |gx| {
                        for i in 0..n {
                            for j in 0..cols {
                                gx[j] = gx[j] + g[i * cols + j];
                            }
                        }
                    });
                } else {
                    self.acc_into(grads, *x, |gx| {
                        for i in 0..rows {
                            let mut acc = S::zero();
                            for j in 0..n {
                                acc = acc + g[i * n + j];
                            }
                            gx[i] = gx[i] + acc;
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, weights } => {
                let (lr, lc) = self.shape(*logits);
                let ld = self.data(*logits);
                let gout = g[0];
                self.acc_into(grads, *logits, |gl| {
                    for i in 0..lr {
                        let row = &ld[i * lc..(i + 1) * lc];
                        let m = row.iter().cloned().fold(S::neg_infinity(), S::max);
                        let mut z = S::zero();
                        for &v in row {
                            z = z + (v - m).exp();
                        }
                        let wi = gout * weights[i];
                        for j in 0..lc {
                            let p = (row[j] - m).exp() / z;
                            let t = if targets[i] as usize == j { S::one() } else { S::zero() };
                            gl[i * lc + j] = gl[i * lc + j] + wi * (p - t);
                        }
                    }
                });
            }
        }
    }
}
