//! Dense row-major tensors (rank 0, 1, or 2) with a trainable-set flag.
//!
//! A tensor's [`TensorId`] is its identity for gradient bookkeeping: the tape
//! deduplicates leaves by id and [`crate::tape::GradientRecord`] keys entries
//! by it. Cloning produces a new tensor with a fresh identity.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::real::Real;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

#[derive(Debug)]
pub struct Tensor<T> {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<T>,
    trainable: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            id: fresh_id(),
            shape,
            data,
            trainable: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            id: fresh_id(),
            shape,
            data: vec![T::zero(); numel],
            trainable: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            id: fresh_id(),
            shape,
            data: vec![value; numel],
            trainable: false,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self {
            id: fresh_id(),
            shape: vec![],
            data: vec![value],
            trainable: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    shape: vec![rows.len(), cols],
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[T] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    /// First element; the value of a rank-0 tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Real> Clone for Tensor<T> {
    /// Clones contents under a fresh identity; the copy is a distinct
    /// parameter as far as gradient bookkeeping is concerned.
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            trainable: self.trainable,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn clone_gets_fresh_identity() {
        let a = Tensor::<f64>::zeros(vec![2, 2]);
        let b = a.clone();
        assert_ne!(a.id(), b.id());
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(3.5f64);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 3.5);
    }
}
