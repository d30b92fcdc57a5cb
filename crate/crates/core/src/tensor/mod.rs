//! Dense row-major tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain value: a shape and a buffer. Gradient tracking lives
//! on a [`Tape`], which records every operation applied to its [`Var`]
//! handles and replays them in reverse on [`Tape::backward`].

mod conv;
mod tape;

pub use conv::ConvGeometry;
pub(crate) use tape::sigmoid;
pub use tape::{Tape, Var, OP_NAMES};

use std::fmt;

use crate::scalar::Scalar;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("conv2d: {0}")]
    Conv(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    UnknownVar(usize),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// N-dimensional array of scalars stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, converting each element.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self, TensorError> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<S> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let lead = *self.shape.first().ok_or(TensorError::Rank {
            op: "slice_batch",
            expected: 1,
            shape: self.shape.clone(),
        })?;
        if start > end || end > lead {
            return Err(TensorError::Invalid(format!(
                "slice_batch: range {start}..{end} out of bounds for leading dim {lead}"
            )));
        }
        let stride = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }

    /// Stacks the listed rows of the leading axis into a new tensor.
    pub fn gather_batch(&self, rows: &[usize]) -> Result<Self, TensorError> {
        let lead = *self.shape.first().ok_or(TensorError::Rank {
            op: "gather_batch",
            expected: 1,
            shape: self.shape.clone(),
        })?;
        let stride = numel(&self.shape[1..]);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(TensorError::Invalid(format!(
                    "gather_batch: row {r} out of bounds for leading dim {lead}"
                )));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    /// Converts every element to another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                shape: vec![2, 3],
                expected: 6,
                actual: 5
            }
        );
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5f64);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.item(), Some(2.5));
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::<f64>::from_fn(vec![3, 2], |i| i as f64);
        assert_eq!(t.slice_batch(1, 3).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(
            t.gather_batch(&[2, 0]).unwrap().data(),
            &[4.0, 5.0, 0.0, 1.0]
        );
        assert!(t.gather_batch(&[3]).is_err());
    }
}
