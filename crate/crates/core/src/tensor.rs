// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major `f32` matrices and the handful of kernels the forward pass
//! is built from.
//!
//! Every kernel validates shapes up front and checks its output for NaN/Inf,
//! so a non-finite value is reported where it first appears instead of
//! silently propagating to the logits.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: {left} vs {right} ({context})")]
    DimensionMismatch {
        left: usize,
        right: usize,
        context: &'static str,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn check_dims(left: usize, right: usize, context: &'static str) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(TensorError::DimensionMismatch {
            left,
            right,
            context,
        })
    }
}

fn ensure_finite(values: &[f32], context: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(context))
    }
}

/// A dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        check_dims(data.len(), rows * cols, "matrix data length")?;
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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            check_dims(row.len(), cols, "ragged rows")?;
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

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Adds `bias` to every row in place.
    pub fn add_row_vector(&mut self, bias: &[f32]) -> Result<()> {
        check_dims(bias.len(), self.cols, "row bias")?;
        for i in 0..self.rows {
            for (v, b) in self.row_mut(i).iter_mut().zip(bias) {
                *v += b;
            }
        }
        ensure_finite(&self.data, "add_row_vector")
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dims(a.cols, b.rows, "matmul inner dimension")?;
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    // i-k-j order: the inner loop streams one row of `b` into one row of the
    // output, which the compiler vectorizes.
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (t, &a_it) in a_row.iter().enumerate() {
            if a_it == 0.0 {
                continue;
            }
            let b_row = &b.data[t * n..(t + 1) * n];
            for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
                *o += a_it * b_tj;
            }
        }
    }
    ensure_finite(&out, "matmul")?;
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Softmax of a single slice, max-subtracted.
pub fn softmax(values: &[f32]) -> Result<Vec<f32>> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out, 1.0)?;
    Ok(out)
}

fn softmax_in_place(row: &mut [f32], scale: f32) -> Result<()> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite("softmax input"));
    }
    let max = row
        .iter()
        .map(|&v| v * scale)
        .fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += f64::from(*v);
    }
    let inv = (1.0 / sum) as f32;
    for v in row.iter_mut() {
        *v *= inv;
    }
    Ok(())
}

/// Row-wise softmax of `scale · m`.
pub fn softmax_rows(m: &Matrix, scale: f32) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(TensorError::InvalidArgument("softmax scale must be positive"));
    }
    let mut out = m.clone();
    if out.cols == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(m.cols) {
        softmax_in_place(row, scale)?;
    }
    ensure_finite(&out.data, "softmax_rows")?;
    Ok(out)
}

/// Layer normalization over one feature vector using the population variance.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32) -> Result<Vec<f32>> {
    check_dims(x.len(), gamma.len(), "layer_norm gamma")?;
    check_dims(x.len(), beta.len(), "layer_norm beta")?;
    if !(eps > 0.0) {
        return Err(TensorError::InvalidArgument("layer_norm eps must be positive"));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
    let out: Vec<f32> = x
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| (f64::from(g) * (f64::from(v) - mean) * inv_std + f64::from(b)) as f32)
        .collect();
    ensure_finite(&out, "layer_norm")?;
    Ok(out)
}

/// Applies [`layer_norm`] to every row of `m`.
pub fn layer_norm_rows(m: &Matrix, gamma: &[f32], beta: &[f32], eps: f32) -> Result<Matrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for row in m.iter_rows() {
        data.extend(layer_norm(row, gamma, beta, eps)?);
    }
    Ok(Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    })
}

/// Exact-erf GELU: `0.5·x·(1 + erf(x/√2))`.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))) as f32
}

pub fn gelu(x: &[f32]) -> Result<Vec<f32>> {
    ensure_finite(x, "gelu input")?;
    Ok(x.iter().map(|&v| gelu_scalar(v)).collect())
}

pub fn gelu_in_place(m: &mut Matrix) -> Result<()> {
    ensure_finite(&m.data, "gelu input")?;
    for v in &mut m.data {
        *v = gelu_scalar(*v);
    }
    Ok(())
}

/// Elementwise `a + b`.
pub fn add_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dims(a.rows, b.rows, "add_rows rows")?;
    check_dims(a.cols, b.cols, "add_rows cols")?;
    let data: Vec<f32> = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    ensure_finite(&data, "add_rows")?;
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}
