//! Dense row-major `f64` tensors.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor dims {dims:?} require {expected} values, got {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor dims {0:?} contain a zero extent")]
    ZeroDim(Vec<usize>),
    #[error("tensor value at flat index {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
}

/// A dense tensor of `f64` values stored in row-major order.
///
/// Values read from external input are checked for finiteness at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self, TensorError> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if values.len() != expected {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            values: vec![value; len],
        }
    }

    /// Builds a tensor from values produced by in-crate arithmetic.
    pub(crate) fn from_raw(dims: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        Self { dims, values }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Reinterprets the same values under new dims with equal element count.
    pub fn reshape(self, dims: Vec<usize>) -> Result<Self, TensorError> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if expected != self.values.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: self.values.len(),
            });
        }
        Ok(Self {
            dims,
            values: self.values,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

fn check_dims(dims: &[usize]) -> Result<(), TensorError> {
    if dims.contains(&0) {
        return Err(TensorError::ZeroDim(dims.to_vec()));
    }
    Ok(())
}
