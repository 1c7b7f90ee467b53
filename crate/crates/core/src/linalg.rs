//! Minimal row-major dense matrix used by the encoder and prompt assembly.

use crate::rng::{self, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Wraps a row-major buffer. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length");
        Matrix { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: rng::normal_vec(rng, rows * cols, std),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    /// Row vector times matrix: `x · M`, with `x.len() == rows`.
    pub fn left_mul(&self, x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * m;
            }
        }
        out
    }

    /// Matrix times column vector: `M · y`, with `y.len() == cols`.
    ///
    /// This is the pullback of [`Matrix::left_mul`]: if `z = x · M` then
    /// `∂L/∂x = M · ∂L/∂z`.
    pub fn right_mul(&self, y: &[T]) -> Vec<T> {
        debug_assert_eq!(y.len(), self.cols);
        (0..self.rows)
            .map(|i| crate::scalar::dot(self.row(i), y))
            .collect()
    }
}
