//! Dense row-major f64 tensors of rank at most 4.
//!
//! `GridTensor` is the universal value type: climate channels (H×W),
//! activations (N×C×H×W), convolution kernels (Cout×Cin×k×k), per-channel
//! parameter vectors (C) and loss scalars (rank 0) are all instances of it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct GridTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl GridTensor {
    /// Builds a tensor, validating rank, element count and finiteness.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > MAX_RANK {
            return Err(invalid(format!(
                "tensor rank {} exceeds the maximum of {MAX_RANK}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(format!(
                "shape {shape:?} implies {expected} values but {} were given",
                data.len()
            )));
        }
        let t = GridTensor { shape, data };
        t.check_finite("tensor construction")?;
        Ok(t)
    }

    /// Builds a tensor without the finiteness scan. Callers must guarantee
    /// the data is finite or run `check_finite` themselves.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert!(shape.len() <= MAX_RANK);
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        GridTensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert!(shape.len() <= MAX_RANK, "tensor rank exceeds {MAX_RANK}");
        let n: usize = shape.iter().product();
        GridTensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(shape.len() <= MAX_RANK, "tensor rank exceeds {MAX_RANK}");
        let n: usize = shape.iter().product();
        GridTensor {
            shape,
            data: vec![value; n],
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        GridTensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Total element count.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics when the tensor holds more than one value; callers check
    /// scalarity where it is part of a contract.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Interprets the shape as N×C×H×W.
    pub fn dims4(&self, op: &str) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(invalid(format!(
                "{op}: expected a rank-4 N×C×H×W tensor, got shape {other:?}"
            ))),
        }
    }

    /// Interprets the shape as C×H×W.
    pub fn dims3(&self, op: &str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(invalid(format!(
                "{op}: expected a rank-3 C×H×W tensor, got shape {other:?}"
            ))),
        }
    }

    /// Interprets the shape as H×W.
    pub fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[h, w] => Ok((h, w)),
            other => Err(invalid(format!(
                "{op}: expected a rank-2 H×W tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn same_shape(&self, other: &GridTensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_mismatch(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    /// Errors when any stored value is NaN or infinite.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                op: String::from(op),
            })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridTensor {
        GridTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise binary combination of two same-shaped tensors.
    pub fn zip(
        &self,
        other: &GridTensor,
        op: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<GridTensor> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(GridTensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Reshapes without moving data; the element count must be unchanged.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<GridTensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(shape_mismatch("reshape", &self.shape, &shape));
        }
        Ok(GridTensor {
            shape,
            data: self.data.clone(),
        })
    }
}

/// Flat index into an N×C×H×W tensor.
#[inline]
pub(crate) fn idx4(
    c_dim: usize,
    h_dim: usize,
    w_dim: usize,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> usize {
    ((n * c_dim + c) * h_dim + h) * w_dim + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_above_four() {
        let err = GridTensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn rejects_length_mismatch() {
        let err = GridTensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn rejects_non_finite_values() {
        let err = GridTensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = GridTensor::new(vec![2], vec![f64::INFINITY, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn scalar_roundtrip() {
        let s = GridTensor::scalar(2.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn zero_extent_is_allowed() {
        let t = GridTensor::new(vec![1, 0, 4, 4], Vec::new()).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = GridTensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
