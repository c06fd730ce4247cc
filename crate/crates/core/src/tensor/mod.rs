//! Dense row-major `f32` matrices and the handful of kernels the attention
//! path needs: matmul, scaled row softmax and per-channel statistics.
//!
//! Storage is always `f32`. Reductions (dot products, means, variances)
//! accumulate in `f64` and round once at the end.

mod format;
mod rng;

pub use format::{decode, encode, read_file, write_file, TensorData, MAGIC, VERSION};
pub use rng::{derive_seed, Pcg32};

use crate::error::{Error, Result};

/// Floor applied to per-channel standard deviations.
pub const STD_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
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
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Standard-normal entries multiplied by `scale`.
    pub fn random_normal(rows: usize, cols: usize, scale: f32, rng: &mut Pcg32) -> Self {
        Self::from_fn(rows, cols, |_, _| rng.next_normal() * scale)
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::validation(format!("{what} contains NaN or Inf")))
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.rows {
            return Err(Error::shape(format!(
                "row range {start}..{end} out of bounds for {} rows",
                self.rows
            )));
        }
        Ok(Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        })
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(Error::shape(format!(
                "column range {start}..{end} out of bounds for {} columns",
                self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, end - start, |r, c| {
            self.get(r, start + c)
        }))
    }

    /// Concatenates along the sequence (row) dimension.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = match parts.first() {
            Some(m) => m.cols,
            None => return Err(Error::shape("vstack of zero matrices")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::shape(format!(
                    "vstack column mismatch: {} vs {cols}",
                    m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Concatenates along the channel (column) dimension.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = match parts.first() {
            Some(m) => m.rows,
            None => return Err(Error::shape("hstack of zero matrices")),
        };
        if let Some(m) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::shape(format!(
                "hstack row mismatch: {} vs {rows}",
                m.rows
            )));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn scale(&self, s: f32) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Adds `v` to every row.
    pub fn add_row_vector(&self, v: &[f32]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "row vector of length {} added to {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, b) in out.row_mut(r).iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = vec![0.0f32; a.rows * b.cols];
    let mut acc = vec![0.0f64; b.cols];
    for r in 0..a.rows {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (k, &av) in a.row(r).iter().enumerate() {
            let av = av as f64;
            for (x, &bv) in acc.iter_mut().zip(b.row(k)) {
                *x += av * bv as f64;
            }
        }
        for (o, x) in out[r * b.cols..(r + 1) * b.cols].iter_mut().zip(&acc) {
            *o = *x as f32;
        }
    }
    Matrix::new(a.rows, b.cols, out)
}

/// `a · bᵀ`, the logit product for row-major queries and keys.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::shape(format!(
            "a·bᵀ needs equal widths, got {} and {}",
            a.cols, b.cols
        )));
    }
    Ok(Matrix::from_fn(a.rows, b.rows, |r, c| {
        dot(a.row(r), b.row(c)) as f32
    }))
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Row-wise softmax of `a / scale`, stabilised by subtracting the row max.
pub fn row_softmax(a: &Matrix, scale: f32) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::validation(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    a.ensure_finite("softmax input")?;
    let scale = scale as f64;
    let mut out = a.clone();
    for r in 0..a.rows {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64 / scale));
        let exps: Vec<f64> = row
            .iter()
            .map(|&v| (v as f64 / scale - max).exp())
            .collect();
        let sum: f64 = exps.iter().sum();
        for (o, e) in row.iter_mut().zip(exps) {
            *o = (e / sum) as f32;
        }
    }
    Ok(out)
}

/// Per-channel mean and (population) standard deviation over the rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Statistics per column, taken over the sequence dimension. The standard
/// deviation is floored at [`STD_EPS`]; NaN inputs propagate unchanged.
pub fn channel_stats(a: &Matrix) -> Result<ChannelStats> {
    let (mean, std) = channel_stats_f64(a)?;
    Ok(ChannelStats {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        std: std.into_iter().map(|s| s as f32).collect(),
    })
}

pub(crate) fn channel_stats_f64(a: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::validation("channel statistics of an empty matrix"));
    }
    let n = a.rows as f64;
    let mut mean = vec![0.0f64; a.cols];
    for r in 0..a.rows {
        for (m, &v) in mean.iter_mut().zip(a.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; a.cols];
    for r in 0..a.rows {
        for ((s, &v), m) in var.iter_mut().zip(a.row(r)).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let eps = STD_EPS as f64;
    let std = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            // NaN must survive the floor so contamination stays visible.
            if sd < eps {
                eps
            } else {
                sd
            }
        })
        .collect();
    Ok((mean, std))
}
