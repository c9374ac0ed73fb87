//! Dense row-major `f32` tensors.

use std::fmt;

use crate::error::{shape_err, Result, TensorError};
use crate::rng::Rng;

/// A dense, row-major array of 32-bit floats.
///
/// Gradients are not stored here; they live on the [`Graph`](crate::Graph)
/// node that wraps a tensor during a forward pass.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A zero-dimensional tensor holding one value.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn(shape: &[usize], std: f32, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Samples i.i.d. entries uniformly from `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(shape_err(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err(
                "dims2",
                format!("expected a matrix, shape is {:?}", self.shape),
            )),
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.last_dim();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    /// Bitwise equality: same shape and identical bit patterns.
    pub fn bit_identical(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| f64::from(x) * f64::from(x))
            .sum::<f64>()
            .sqrt()
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

/// Boolean attention / validity mask. `true` means "may attend".
///
/// A mask broadcasts against a tensor whose trailing dimensions equal the
/// mask shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Vec<usize>, allowed: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != allowed.len() {
            return Err(shape_err("mask", "shape does not match element count"));
        }
        Ok(Self { shape, allowed })
    }

    /// A `rows x cols` mask with entry `(i, j)` given by `f(i, j)`.
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            allowed,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.shape[1] + j]
    }

    /// Element-wise AND of two equally shaped masks.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(shape_err("mask_and", "mask shapes differ"));
        }
        Ok(Mask {
            shape: self.shape.clone(),
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    /// Restricts keys (columns) to those marked valid.
    pub fn with_key_padding(&self, key_valid: &[bool]) -> Result<Mask> {
        let [rows, cols] = self.shape[..] else {
            return Err(shape_err("with_key_padding", "mask is not 2-D"));
        };
        if key_valid.len() != cols {
            return Err(shape_err("with_key_padding", "key mask length mismatch"));
        }
        Ok(Mask::from_fn(rows, cols, |i, j| self.get(i, j) && key_valid[j]))
    }

    /// Checks that the mask broadcasts against `shape`.
    pub(crate) fn check_broadcast(&self, shape: &[usize], op: &'static str) -> Result<()> {
        let mut mshape: &[usize] = &self.shape;
        while mshape.len() > 1 && mshape[0] == 1 {
            mshape = &mshape[1..];
        }
        if mshape.len() > shape.len() || shape[shape.len() - mshape.len()..] != *mshape {
            return Err(shape_err(
                op,
                format!("mask {:?} does not broadcast to {:?}", self.shape, shape),
            ));
        }
        Ok(())
    }
}
