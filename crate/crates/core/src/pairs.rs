//! Strict upper-triangle storage for symmetric voxel-pair quantities.
//!
//! A `V x V` symmetric field with an implied diagonal is kept as the
//! `V (V - 1) / 2` entries `(i, j)` with `i < j`, in row-major order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PairField {
    n: usize,
    values: Vec<f64>,
}

/// Number of unique unordered pairs among `n` items.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

impl PairField {
    pub fn zeros(n: usize) -> Self {
        Self::filled(n, 0.0)
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self {
            n,
            values: vec![value; pair_count(n)],
        }
    }

    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != pair_count(n) {
            return Err(Error::DimensionMismatch {
                expected: pair_count(n),
                found: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(pair_count(n));
        for i in 0..n {
            for j in i + 1..n {
                values.push(f(i, j));
            }
        }
        Self { n, values }
    }

    /// Reads the strict upper triangle of a square matrix.
    pub fn from_upper(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        Ok(Self::from_fn(m.nrows(), |i, j| m[(i, j)]))
    }

    /// Expands to a dense symmetric matrix with the given diagonal.
    pub fn to_dense(&self, diagonal: f64) -> DMatrix<f64> {
        let mut m = DMatrix::from_element(self.n, self.n, diagonal);
        for ((i, j), v) in self.iter_pairs() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
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

    /// Flat index of the unordered pair `{i, j}`; `i != j`.
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j && i < self.n && j < self.n);
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        a * (2 * self.n - a - 1) / 2 + (b - a - 1)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = self.index(i, j);
        self.values[k] = value;
    }

    pub fn iter_pairs(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        let n = self.n;
        (0..n)
            .flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
            .zip(self.values.iter().copied())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            n: self.n,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &PairField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_dim(other)?;
        Ok(Self {
            n: self.n,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_dim(&self, other: &PairField) -> Result<()> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                found: other.n,
            });
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return f64::NAN;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}
