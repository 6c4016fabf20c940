//! Dense row-major `f32` tensors.

use crate::error::{shape_err, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Builds a tensor from a closure over flat indices.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericOverflow { op })
        }
    }

    /// Number of rows when viewed as `[shape[0], rest]`.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    /// Selects rows (first-axis slices) by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::EmptySet);
        }
        let w = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.shape[0] {
                return Err(shape_err("select_rows", format!("row {i} of {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptySet)?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err("concat_rows", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self * a + other * b`, elementwise.
    pub fn lerp(&self, a: f32, other: &Tensor, b: f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err("lerp", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&x, &y)| a * x + b * y).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}
