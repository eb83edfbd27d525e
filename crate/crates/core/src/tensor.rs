use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense real-valued tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> RealTensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(RealTensor { shape, values })
    }

    /// Skips the finiteness scan; callers guarantee it.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), values.len());
        RealTensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        RealTensor { shape, values: vec![T::zero(); n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Callers keep values finite.
    pub(crate) fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.values.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(RealTensor { shape, values: self.values })
    }

    pub fn cast<U: Scalar>(&self) -> RealTensor<U> {
        RealTensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::from_f64_lossy(v.to_f64_exact())).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Rows `[start, start + count)` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> RealTensor<T> {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        RealTensor::from_parts(shape, self.values[start * row..(start + count) * row].to_vec())
    }

    /// Gather rows along the leading axis.
    pub fn gather_rows(&self, rows: &[usize]) -> RealTensor<T> {
        let row: usize = self.shape[1..].iter().product();
        let mut values = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            values.extend_from_slice(&self.values[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        RealTensor::from_parts(shape, values)
    }
}
