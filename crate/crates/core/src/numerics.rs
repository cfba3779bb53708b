//! Dense real matrices and the deterministic random source.
//!
//! Matrices are row-major `f64`. Sample-carrying matrices (features,
//! prototypes, assignments, raw inputs) store one sample per column.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_cols(cols: &[Vec<f64>]) -> Result<Self> {
        let rows = cols.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, cols.len());
        for (c, v) in cols.iter().enumerate() {
            if v.len() != rows {
                return Err(Error::ShapeMismatch {
                    op: "from_cols",
                    left: (rows, 1),
                    right: (v.len(), 1),
                });
            }
            for (r, &x) in v.iter().enumerate() {
                m.data[r * m.cols + c] = x;
            }
        }
        Ok(m)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for (r, &x) in v.iter().enumerate() {
            self.set(r, c, x);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch { op, left: self.shape(), right: other.shape() });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(r)) {
                *acc += x;
            }
        }
        s
    }

    pub fn col_norms(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, x) in s.iter_mut().zip(self.row(r)) {
                *acc += x * x;
            }
        }
        s.into_iter().map(f64::sqrt).collect()
    }

    /// Multiplies column `c` by `factors[c]`.
    pub fn scale_cols(&mut self, factors: &[f64]) {
        assert_eq!(factors.len(), self.cols);
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, f) in row.iter_mut().zip(factors) {
                *x *= f;
            }
        }
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn scale_rows(&mut self, factors: &[f64]) {
        assert_eq!(factors.len(), self.rows);
        for (r, f) in factors.iter().enumerate() {
            for x in &mut self.data[r * self.cols..(r + 1) * self.cols] {
                *x *= f;
            }
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.rows, idx.len());
        for r in 0..self.rows {
            let src = self.row(r);
            let dst = &mut m.data[r * idx.len()..(r + 1) * idx.len()];
            for (d, &i) in dst.iter_mut().zip(idx) {
                *d = src[i];
            }
        }
        m
    }

    pub fn col_range(&self, start: usize, end: usize) -> Matrix {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(&idx)
    }

    /// Concatenates matrices side by side (columns appended).
    pub fn hcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for m in parts {
            if m.rows != rows {
                return Err(Error::ShapeMismatch { op: "hcat", left: (rows, 0), right: m.shape() });
            }
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + m.cols].copy_from_slice(m.row(r));
            }
            offset += m.cols;
        }
        Ok(out)
    }

    /// Stacks matrices vertically (rows appended).
    pub fn vcat(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::ShapeMismatch { op: "vcat", left: (0, cols), right: m.shape() });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

fn finite_or_err(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite { op })
    }
}

// out += a * b, row by row so the inner loop runs over contiguous memory.
fn accumulate(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    let m = b.cols;
    for i in 0..a.rows {
        let dst = &mut out.data[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
}

/// `a * b`
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    accumulate(&mut out, a, b);
    finite_or_err(out, "matmul")
}

/// `aᵀ * b` without materialising the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch { op: "matmul_tn", left: a.shape(), right: b.shape() });
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for k in 0..a.rows {
        let brow = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let dst = &mut out.data[i * m..(i + 1) * m];
            for (d, &bkj) in dst.iter_mut().zip(brow) {
                *d += aki * bkj;
            }
        }
    }
    finite_or_err(out, "matmul_tn")
}

/// `a * bᵀ`
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch { op: "matmul_nt", left: a.shape(), right: b.shape() });
    }
    let bt = b.transpose();
    let mut out = Matrix::zeros(a.rows, b.rows);
    accumulate(&mut out, a, &bt);
    finite_or_err(out, "matmul_nt")
}

/// Column-wise softmax of `m / temperature`, max-subtracted per column.
pub fn softmax_cols(m: &Matrix, temperature: f64) -> Result<Matrix> {
    let mut out = log_softmax_cols(m, temperature)?;
    for x in out.data_mut() {
        *x = x.exp();
    }
    Ok(out)
}

/// Column-wise log-softmax of `m / temperature`.
pub fn log_softmax_cols(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "softmax_cols" });
    }
    let (rows, cols) = m.shape();
    let mut maxes = vec![f64::NEG_INFINITY; cols];
    for r in 0..rows {
        for (mx, &x) in maxes.iter_mut().zip(m.row(r)) {
            *mx = mx.max(x);
        }
    }
    let mut out = Matrix::zeros(rows, cols);
    let mut sums = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = (m.get(r, c) - maxes[c]) / temperature;
            out.set(r, c, v);
            sums[c] += v.exp();
        }
    }
    let lse: Vec<f64> = sums.iter().map(|s| s.ln()).collect();
    for r in 0..rows {
        for c in 0..cols {
            let v = out.get(r, c) - lse[c];
            out.set(r, c, v);
        }
    }
    finite_or_err(out, "softmax_cols")
}

/// Scales every column to unit Euclidean norm.
pub fn l2_normalize_cols(m: &Matrix) -> Result<Matrix> {
    let norms = m.col_norms();
    if let Some(col) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroColumn { col });
    }
    let mut out = m.clone();
    let inv: Vec<f64> = norms.iter().map(|n| 1.0 / n).collect();
    out.scale_cols(&inv);
    finite_or_err(out, "l2_normalize_cols")
}

/// Seeded random source backed by ChaCha8 (platform-independent stream).
///
/// `derive` produces independent sub-streams keyed by a label so each
/// training phase and generator can draw without perturbing the others.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream for `(seed, stream)`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        xs.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, sd: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| sd * self.normal()).collect();
        Matrix { rows, cols, data }
    }
}
