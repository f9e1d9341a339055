use serde::{Deserialize, Serialize};

use super::NnError;

/// Dense row-major tensor of `f64`.
///
/// Most of the crate works with rank-1 (`[n]`) or rank-2 (`[rows, cols]`)
/// tensors; a rank-1 tensor is treated as a single row where a matrix is
/// expected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(NnError::Shape(format!("invalid shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!("tensor value at index {i}")));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_parts(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, NnError> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NnError::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view; rank-1 tensors are one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    pub fn get2(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.dims2();
        self.data[row * c + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, NnError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(NnError::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
