use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with shape metadata.
///
/// Every extent is at least one, so an empty tensor cannot be constructed.
/// A scalar is represented with shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(alloc::format!(
                "tensor extents must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(alloc::format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics when the shape is invalid; for internal construction where the
    /// shape has already been derived from valid operands.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.iter().all(|&d| d > 0));
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform<R: rand::Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound == 0.0 {
            return t;
        }
        for v in t.data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        t
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of every extent except the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(crate::error::dim_err(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        crate::math::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}
