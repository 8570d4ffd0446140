//! Dense row-major matrix used for query, key and value blocks.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("matrix payload", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. `cols` is needed for the empty case.
    pub fn from_rows<R: AsRef<[f64]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            ensure_len("matrix row", cols, row.len())?;
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 {
            ensure_len("vstack columns", self.cols, other.cols)?;
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.iter_rows() {
            data.extend(f(row));
        }
        let cols = if self.rows == 0 {
            self.cols
        } else {
            data.len() / self.rows
        };
        Matrix {
            rows: self.rows,
            cols,
            data,
        }
    }
}

/// Sequential dot product. Every score in the crate goes through this so that
/// identical inputs produce bit-identical scores on every code path.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
