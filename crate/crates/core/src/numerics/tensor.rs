use std::fmt;
use std::sync::Arc;

use super::NumericsError;

/// Dense row-major `f64` tensor with immutable, shareable storage.
///
/// Rank-0 scalars are represented with shape `[1]`; every dimension is at
/// least one.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &preview).finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<(), NumericsError> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(NumericsError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every tensor needs rank >= 1 and dimensions >= 1".into(),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::InvalidShape {
                shape,
                reason: format!("expected {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data: data.into() })
    }

    /// Construction path for internally computed buffers whose length is
    /// already known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: data.into() }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        if data.is_empty() {
            return Self::zeros(&[n]);
        }
        Self::from_parts(vec![n], data)
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(f).collect())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, NumericsError> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.len() {
            return Err(NumericsError::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Plain (non-differentiable) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        super::kernels::mm_nn(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// Swap two axes (plain, non-differentiable).
    pub fn transpose(&self, a0: usize, a1: usize) -> Tensor {
        let (shape, data) = super::kernels::swap_axes(&self.data, &self.shape, a0, a1);
        Tensor::from_parts(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = a.matmul(&Tensor::eye(2)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn reshape_shares_storage() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = a.reshape(&[3, 2]).unwrap();
        assert_eq!(b.get(&[2, 1]), 5.0);
        assert!(a.reshape(&[4]).is_err());
    }
}
