//! Dense row-major f32 tensor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major f32 tensor. 4-D activations use (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("shape {shape:?} has a zero or no dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics if `shape` contains a zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// (N, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, format!("expected rank-4 NCHW, got {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Bitwise equality, distinguishing -0.0 and NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Select entries along `axis` (keeping order) and return a new tensor.
    pub fn select(&self, axis: usize, keep: &[usize]) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape("select", format!("axis {axis} out of rank {}", self.rank())));
        }
        if keep.is_empty() {
            return Err(Error::shape("select", "empty keep list"));
        }
        let dim = self.shape[axis];
        if let Some(&bad) = keep.iter().find(|&&k| k >= dim) {
            return Err(Error::shape("select", format!("index {bad} >= axis length {dim}")));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let start = (o * dim + k) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor::new(shape, data)
    }

    /// Zero every slice at `indices` along `axis`.
    pub fn zero_along(&mut self, axis: usize, indices: &[usize]) {
        let dim = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        for o in 0..outer {
            for &k in indices {
                let start = (o * dim + k) * inner;
                self.data[start..start + inner].fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn select_rows_and_columns() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f32);
        let rows = t.select(0, &[0, 2]).unwrap();
        assert_eq!(rows.data(), &[0.0, 1.0, 4.0, 5.0]);
        let cols = t.select(1, &[1]).unwrap();
        assert_eq!(cols.data(), &[1.0, 3.0, 5.0]);
        assert!(t.select(1, &[2]).is_err());
    }

    #[test]
    fn zero_along_axis() {
        let mut t = Tensor::full(&[2, 3, 2], 1.0);
        t.zero_along(1, &[1]);
        assert_eq!(t.data(), &[1., 1., 0., 0., 1., 1., 1., 1., 0., 0., 1., 1.]);
    }
}
