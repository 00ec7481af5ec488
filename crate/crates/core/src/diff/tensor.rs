//! Dense row-major tensors.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DiffError, Result, Scalar};

/// Dense row-major tensor. Rank 0/1/2 are all usable on the graph; a rank-1
/// tensor enters the graph as a row vector and a rank-0 as a 1x1 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(DiffError::Shape {
                op: "tensor",
                detail: format!("dims {:?} imply {} values, got {}", dims, n, data.len()),
            });
        }
        Ok(Tensor { dims, data, requires_grad: false })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![S::zero(); n], requires_grad: false }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![v; n], requires_grad: false }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { dims: vec![1, 1], data: vec![v], requires_grad: false }
    }

    pub fn row(data: Vec<S>) -> Self {
        Tensor { dims: vec![1, data.len()], data, requires_grad: false }
    }

    pub fn col(data: Vec<S>) -> Self {
        Tensor { dims: vec![data.len(), 1], data, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Matrix with i.i.d. N(0, std^2) entries.
    pub fn randn<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                S::of_f64(z * std)
            })
            .collect();
        Tensor { dims: vec![rows, cols], data, requires_grad: false }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// View as a 2-D shape: scalars become 1x1, vectors become row vectors.
    pub fn shape2d(&self) -> Result<(usize, usize)> {
        match self.dims.len() {
            0 => Ok((1, 1)),
            1 => Ok((1, self.dims[0])),
            2 => Ok((self.dims[0], self.dims[1])),
            _ => Err(DiffError::Shape {
                op: "tensor",
                detail: format!("rank-{} tensor has no 2-D view", self.dims.len()),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape2d().map(|(r, _)| r).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape2d().map(|(_, c)| c).unwrap_or(0)
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        let (_, cols) = self.shape2d().expect("2-D tensor");
        self.data[r * cols + c]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| T::of_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn approx_eq(&self, other: &Tensor<S>, tol: f64) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| (a.as_f64() - b.as_f64()).abs() <= tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_dims() {
        let r = Tensor::new(vec![2, 3], vec![0.0f32; 5]);
        assert!(r.is_err());
    }

    #[test]
    fn shape2d_views() {
        let s = Tensor::scalar(1.0f64);
        assert_eq!(s.shape2d().unwrap(), (1, 1));
        let v = Tensor::new(vec![4], vec![0.0f64; 4]).unwrap();
        assert_eq!(v.shape2d().unwrap(), (1, 4));
        let m = Tensor::zeros(&[3, 2]);
        assert_eq!(Tensor::<f64>::shape2d(&m).unwrap(), (3, 2));
    }
}
