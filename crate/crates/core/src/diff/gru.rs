//! Gated recurrent unit cell, composed from catalog primitives.

use super::{Graph, NodeId, Result, Scalar};

/// GRU weights. `w_*` map the input, `u_*` map the state, `b_*` are biases
/// (1 x D). The reset gate multiplies the state before the candidate map:
///
///   r  = sigmoid(x.Wr + h.Ur + br)
///   z  = sigmoid(x.Wz + h.Uz + bz)
///   n  = tanh(x.Wn + bn + (r * h).Un)
///   h' = (1 - z) * n + z * h
#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub w_reset: T,
    pub u_reset: T,
    pub b_reset: T,
    pub w_update: T,
    pub u_update: T,
    pub b_update: T,
    pub w_cand: T,
    pub u_cand: T,
    pub b_cand: T,
}

impl<T: Copy> GruParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> GruParams<U> {
        GruParams {
            w_reset: f(self.w_reset),
            u_reset: f(self.u_reset),
            b_reset: f(self.b_reset),
            w_update: f(self.w_update),
            u_update: f(self.u_update),
            b_update: f(self.b_update),
            w_cand: f(self.w_cand),
            u_cand: f(self.u_cand),
            b_cand: f(self.b_cand),
        }
    }
}

/// One GRU step applied row-wise: `state` and `input` are both R x D.
pub fn gru_cell<S: Scalar>(
    g: &mut Graph<S>,
    state: NodeId,
    input: NodeId,
    p: &GruParams<NodeId>,
) -> Result<NodeId> {
    let xr = g.matmul(input, p.w_reset)?;
    let hr = g.matmul(state, p.u_reset)?;
    let pre_r = g.add(xr, hr)?;
    let pre_r = g.add_bias(pre_r, p.b_reset)?;
    let r = g.sigmoid(pre_r)?;

    let xz = g.matmul(input, p.w_update)?;
    let hz = g.matmul(state, p.u_update)?;
    let pre_z = g.add(xz, hz)?;
    let pre_z = g.add_bias(pre_z, p.b_update)?;
    let z = g.sigmoid(pre_z)?;

    let rh = g.mul(r, state)?;
    let xn = g.matmul(input, p.w_cand)?;
    let xn = g.add_bias(xn, p.b_cand)?;
    let hn = g.matmul(rh, p.u_cand)?;
    let pre_n = g.add(xn, hn)?;
    let n = g.tanh(pre_n)?;

    // h' = n - z*n + z*h
    let zn = g.mul(z, n)?;
    let zh = g.mul(z, state)?;
    let keep = g.sub(n, zn)?;
    g.add(keep, zh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    fn zero_params(g: &mut Graph<f64>, d: usize) -> GruParams<NodeId> {
        let w = || Tensor::<f64>::zeros(&[d, d]);
        let b = || Tensor::<f64>::zeros(&[1, d]);
        GruParams {
            w_reset: g.leaf(&w(), false).unwrap(),
            u_reset: g.leaf(&w(), false).unwrap(),
            b_reset: g.leaf(&b(), false).unwrap(),
            w_update: g.leaf(&w(), false).unwrap(),
            u_update: g.leaf(&w(), false).unwrap(),
            b_update: g.leaf(&b(), false).unwrap(),
            w_cand: g.leaf(&w(), false).unwrap(),
            u_cand: g.leaf(&w(), false).unwrap(),
            b_cand: g.leaf(&b(), false).unwrap(),
        }
    }

    // All-zero weights: z = sigmoid(0) = 0.5, n = tanh(0) = 0, so the new
    // state is half the old one.
    #[test]
    fn zero_weights_halve_state()  {
        let mut g = Graph::new();
        let p = zero_params(&mut g, 1);
        let h = g.leaf(&Tensor::row(vec![1.0]), false).unwrap();
        let x = g.leaf(&Tensor::row(vec![0.3]), false).unwrap();
        let out = gru_cell(&mut g, h, x, &p).unwrap();
        assert_eq!(g.data(out), &[0.5]);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut g = Graph::new();
        let mut p = zero_params(&mut g, 2);
        p.b_update = g.leaf(&Tensor::row(vec![100.0, 100.0]), false).unwrap();
        let h = g.leaf(&Tensor::row(vec![0.7, -1.3]), false).unwrap();
        let x = g.leaf(&Tensor::row(vec![5.0, 5.0]), false).unwrap();
        let out = gru_cell(&mut g, h, x, &p).unwrap();
        assert_eq!(g.data(out), g.data(h));
    }

    #[test]
    fn closed_update_gate_takes_candidate() {
        let mut g = Graph::new();
        let mut p = zero_params(&mut g, 2);
        p.b_update = g.leaf(&Tensor::row(vec![-100.0, -100.0]), false).unwrap();
        // candidate bias drives n = tanh(1)
        p.b_cand = g.leaf(&Tensor::row(vec![1.0, 1.0]), false).unwrap();
        let h = g.leaf(&Tensor::row(vec![0.7, -1.3]), false).unwrap();
        let x = g.leaf(&Tensor::row(vec![0.0, 0.0]), false).unwrap();
        let out = gru_cell(&mut g, h, x, &p).unwrap();
        let expect = 1.0f64.tanh();
        for &v in g.data(out) {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let p = zero_params(&mut g, 2);
        let h = g.leaf(&Tensor::zeros(&[3, 2]), false).unwrap();
        let x = g.leaf(&Tensor::zeros(&[3, 4]), false).unwrap();
        assert!(gru_cell(&mut g, h, x, &p).is_err());
    }
}
