//! Dense row-major `f64` matrix.
//!
//! Deliberately minimal: the training engine needs predictable memory layout
//! and a *fixed* accumulation order so that a forward pass resumed from a
//! cached activation is bit-identical to the full pass. Every reduction in
//! this crate runs left-to-right over the stored order; nothing here may
//! reorder sums behind the caller's back.

use crate::error::{Error, Result};

/// Row-major matrix of `f64` values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Wraps an existing buffer; `data.len()` must equal `rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} = {} elements", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::shape("Matrix::from_rows", c, format!("{} in row {i}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Extracts a single row as a 1 x cols matrix.
    pub fn row_matrix(&self, r: usize) -> Matrix {
        Matrix {
            rows: 1,
            cols: self.cols,
            data: self.row(r).to_vec(),
        }
    }

    /// Stacks 1 x cols row matrices back into one matrix, in the order given.
    pub fn stack_rows(rows: &[Matrix]) -> Result<Matrix> {
        let c = rows.first().map_or(0, Matrix::cols);
        let mut data = Vec::with_capacity(rows.len() * c);
        for (i, m) in rows.iter().enumerate() {
            if m.rows != 1 || m.cols != c {
                return Err(Error::shape("Matrix::stack_rows", format!("1x{c}"), format!("{}x{} at {i}", m.rows, m.cols)));
            }
            data.extend_from_slice(&m.data);
        }
        Matrix::new(rows.len(), c, data)
    }

    /// True when all entries are finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += other`, left-to-right over the buffer.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::add_assign",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self -= scale * other`; the SGD update primitive.
    pub fn sub_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(
                "Matrix::sub_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= scale * b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Matrix::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn from_rows_rejects_ragged_input() {
        assert!(Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn row_round_trip() {
        let m = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let parts: Vec<Matrix> = (0..2).map(|r| m.row_matrix(r)).collect();
        assert_eq!(Matrix::stack_rows(&parts).unwrap(), m);
    }

    #[test]
    fn sub_scaled_is_plain_sgd() {
        let mut w = Matrix::from_rows(vec![vec![1.0, -2.0]]).unwrap();
        let g = Matrix::from_rows(vec![vec![0.5, 0.5]]).unwrap();
        w.sub_scaled(&g, 0.1).unwrap();
        assert_eq!(w.data(), &[1.0 - 0.05, -2.0 - 0.05]);
    }
}
