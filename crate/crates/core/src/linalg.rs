//! Dense row-major `f64` matrices with a data-parallel matrix product.
//!
//! The product is the hot loop of model training, so it is written as an
//! axpy-style ikj kernel that LLVM vectorizes well. The parallel variant
//! splits work over output rows only; every output element is produced by
//! the same sequence of additions as the sequential kernel, so results are
//! bit-identical across thread counts and with the `parallel` feature off.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum `m*k*n` before the parallel kernel is worth the fork overhead.
const PAR_FLOP_CUTOFF: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Mat { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    /// 1 x n row vector.
    pub fn row_vec(data: Vec<f64>) -> Self {
        Mat { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Elementwise map into a new matrix.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Mat, c: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// View of rows `[start, start+len)` as a new matrix (copies).
    pub fn rows_slice(&self, start: usize, len: usize) -> Mat {
        assert!(start + len <= self.rows);
        Mat {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Matrix product, choosing the parallel kernel when it pays off.
    pub fn matmul(&self, other: &Mat) -> Mat {
        #[cfg(feature = "parallel")]
        {
            if self.rows * self.cols * other.cols >= PAR_FLOP_CUTOFF && self.rows > 1 {
                return self.matmul_par(other);
            }
        }
        self.matmul_seq(other)
    }

    /// Sequential ikj product. Always available; the reference kernel.
    pub fn matmul_seq(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            matmul_row(self.row(i), other, out.row_mut(i));
        }
        out
    }

    /// Row-parallel product; bit-identical to [`Mat::matmul_seq`].
    #[cfg(feature = "parallel")]
    pub fn matmul_par(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, other.cols);
        let n = other.cols;
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| matmul_row(self.row(i), other, crow));
        out
    }

    /// `self^T * other` without materializing the transpose.
    pub fn tmatmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "row counts must agree");
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &a) in arow.iter().enumerate() {
                if a != 0.0 {
                    let crow = out.row_mut(i);
                    for (c, &b) in crow.iter_mut().zip(brow) {
                        *c += a * b;
                    }
                }
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols, "column counts must agree");
        let mut out = Mat::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..other.rows {
                let brow = other.row(j);
                let mut acc = 0.0;
                for (a, b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        out
    }
}

#[inline]
fn matmul_row(arow: &[f64], b: &Mat, crow: &mut [f64]) {
    for (k, &a) in arow.iter().enumerate() {
        if a != 0.0 {
            let brow = b.row(k);
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += a * bv;
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Column means of a sample matrix (one row per sample).
pub fn column_means(x: &Mat) -> Vec<f64> {
    let mut means = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (m, v) in means.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    let n = x.rows().max(1) as f64;
    for m in &mut means {
        *m /= n;
    }
    means
}

/// Population standard deviation per column.
pub fn column_stds(x: &Mat, means: &[f64]) -> Vec<f64> {
    let mut vars = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for ((s, &m), v) in vars.iter_mut().zip(means).zip(x.row(i)) {
            let d = v - m;
            *s += d * d;
        }
    }
    let n = x.rows().max(1) as f64;
    vars.iter().map(|v| (v / n).sqrt()).collect()
}
