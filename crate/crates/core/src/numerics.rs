// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense `f64` linear algebra and seeded sampling.
//!
//! Everything here is a pure function of its inputs. [`Matrix::matmul`]
//! accumulates each output element over `k` in ascending order, so results
//! are bit-identical across runs and independent of any thread pool.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
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

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `below`.
    pub fn vstack(&self, below: &Matrix) -> Result<Self> {
        if self.cols != below.cols && self.rows != 0 && below.rows != 0 {
            return Err(Error::dim(
                "vstack",
                format!("{} vs {} columns", self.cols, below.cols),
            ));
        }
        let cols = if self.rows == 0 {
            below.cols
        } else {
            self.cols
        };
        let mut data = self.data.clone();
        data.extend_from_slice(&below.data);
        Ok(Self {
            rows: self.rows + below.rows,
            cols,
            data,
        })
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Matrix product `self × b`.
    ///
    /// Output element `(i, j)` is accumulated as `Σ_k a[i][k]·b[k][j]` with
    /// `k` ascending, starting from `+0.0`. Terms with `a[i][k] == 0` are
    /// skipped; for finite inputs that changes nothing because the
    /// accumulator can never hold `-0.0`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, b.rows, b.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        if b.cols == 0 {
            return Ok(out);
        }
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                "add_assign",
                format!(
                    "{}x{} plus {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::dim(
                "add_row_bias",
                format!("bias of {} for {} columns", bias.len(), self.cols),
            ));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(bias) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Row-wise softmax with max subtraction.
    ///
    /// `-inf` entries get probability 0. A row that is entirely `-inf` maps
    /// to all zeros, which is how a fully knocked-out query row is
    /// represented.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    pub fn relu(&self) -> Matrix {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference to `other`; `inf` if shapes differ.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        if self.rows != other.rows || self.cols != other.cols {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-compressed copy of a matrix used as the right operand of products.
///
/// [`SparseMatrix::left_mul`] gives bit-identical results to
/// [`Matrix::matmul`] against the dense original: the same terms are added
/// in the same order, and the skipped terms are all exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_start: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    /// Rows with at least one stored entry, ascending.
    live_rows: Vec<usize>,
}

impl SparseMatrix {
    pub fn from_dense(m: &Matrix) -> Self {
        let mut row_start = Vec::with_capacity(m.rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_start.push(0);
        for r in 0..m.rows {
            for (c, &v) in m.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_start.push(col_idx.len());
        }
        let live_rows = (0..m.rows)
            .filter(|&r| row_start[r + 1] > row_start[r])
            .collect();
        Self {
            rows: m.rows,
            cols: m.cols,
            row_start,
            col_idx,
            values,
            live_rows,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `a × self`.
    pub fn left_mul(&self, a: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(a.rows, self.cols);
        self.left_mul_add(a, &mut out)?;
        Ok(out)
    }

    /// `out += a × self`, adding each product term to `out` directly.
    pub fn left_mul_add(&self, a: &Matrix, out: &mut Matrix) -> Result<()> {
        if a.cols != self.rows || out.rows != a.rows || out.cols != self.cols {
            return Err(Error::dim(
                "left_mul",
                format!(
                    "{}x{} times {}x{} into {}x{}",
                    a.rows, a.cols, self.rows, self.cols, out.rows, out.cols
                ),
            ));
        }
        if self.cols == 0 {
            return Ok(());
        }
        for i in 0..a.rows {
            let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
            let o_row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            for &k in &self.live_rows {
                let av = a_row[k];
                if av == 0.0 {
                    continue;
                }
                let span = self.row_start[k]..self.row_start[k + 1];
                for (&c, &bv) in self.col_idx[span.clone()].iter().zip(&self.values[span]) {
                    o_row[c] += av * bv;
                }
            }
        }
        Ok(())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    m.softmax_rows()
}

pub fn relu(m: &Matrix) -> Matrix {
    m.relu()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> Result<usize> {
    let (first, rest) = v.split_first().ok_or(Error::Empty("argmax"))?;
    let mut best = 0;
    let mut best_v = *first;
    for (i, &x) in rest.iter().enumerate() {
        if x > best_v {
            best = i + 1;
            best_v = x;
        }
    }
    Ok(best)
}

/// Seeded random stream: ChaCha8 keyed by a 64-bit seed.
///
/// Uniforms take the top 53 bits of one `u64` draw. Normals use the
/// Box–Muller transform on two uniforms and keep both outputs. These
/// definitions are fixed so a seed names the same stream in every release.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Independent child stream keyed by `seed` and a path of indices.
    ///
    /// Used to give every (entity, question) work item its own stream so
    /// results do not depend on how items are scheduled across threads.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut h = splitmix64(seed ^ u64_tag());
        for &p in path {
            h = splitmix64(h ^ splitmix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        }
        Self::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift keeps the stream definition simple; the bias is
        // below 2^-40 for every n used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[inline]
const fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
const fn u64_tag() -> u64 {
    0x766c_6d66_6c6f_7700
}

/// `n` i.i.d. samples from `N(0, sigma²)`. `sigma == 0` returns zeros
/// without consuming randomness.
pub fn gaussian(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| sigma * rng.standard_normal()).collect()
}
