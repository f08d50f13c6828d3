//! Dense row-major matrices with analytic backward passes.
//!
//! Every operation the loss pipeline differentiates through lives here:
//! column normalization, matrix product and row-wise softmax, each paired
//! with a hand-derived backward. The computation graph of the objective is
//! fixed and shallow, so gradients are assembled by explicit chain rule
//! instead of a tape. A finite-difference checker doubles as the test oracle
//! for all of them.
//!
//! Scalars are `f64`; gradient checks are only defined at this precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns with a Euclidean norm below this are treated as degenerate
/// embeddings and rejected rather than clamped.
pub const DEFAULT_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("matrix must be at least 1x1, got {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
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
        Self { rows, cols, data }
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<f64>]) -> Result<Self> {
        let k = cols.len();
        if k == 0 {
            return Err(Error::Shape("no columns".into()));
        }
        let d = cols[0].len();
        if cols.iter().any(|c| c.len() != d) {
            return Err(Error::Shape("ragged columns".into()));
        }
        Ok(Self::from_fn(d, k, |i, j| cols[j][i]))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// `self += s * other`, used by the gradient accumulators.
    pub fn add_scaled_assign(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "expected {}x{}, got {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradients of a scalar loss with respect to a pair of embedding matrices;
/// shapes match the corresponding forward inputs.
#[derive(Clone, Debug)]
pub struct GradientPair {
    pub d_x1: Matrix,
    pub d_x2: Matrix,
}

/// Rescales every column to unit Euclidean norm.
///
/// A column with norm below `DEFAULT_NORM_FLOOR` is an error: near-zero
/// embeddings indicate a training bug upstream, so they are rejected instead
/// of clamped.
pub fn l2_normalize_columns(m: &Matrix) -> Result<Matrix> {
    l2_normalize_columns_with_floor(m, DEFAULT_NORM_FLOOR)
}

pub fn l2_normalize_columns_with_floor(m: &Matrix, floor: f64) -> Result<Matrix> {
    let mut out = m.clone();
    for j in 0..m.cols() {
        let norm = column_norm(m, j);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("norm of column {j}")));
        }
        if norm < floor {
            return Err(Error::DegenerateColumn { col: j, norm, floor });
        }
        for i in 0..m.rows() {
            out.set(i, j, m.get(i, j) / norm);
        }
    }
    Ok(out)
}

/// Backward pass of [`l2_normalize_columns`]: applies the per-column
/// tangent-space projection `(I - u u^T) / ||x||` (with `u = x/||x||`)
/// to the upstream gradient. `m` is the pre-normalization input.
pub fn l2_normalize_backward(m: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if m.rows() != upstream.rows() || m.cols() != upstream.cols() {
        return Err(Error::Shape(format!(
            "normalize backward: input {}x{} vs upstream {}x{}",
            m.rows(),
            m.cols(),
            upstream.rows(),
            upstream.cols()
        )));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for j in 0..m.cols() {
        let norm = column_norm(m, j);
        if norm < DEFAULT_NORM_FLOOR {
            return Err(Error::DegenerateColumn { col: j, norm, floor: DEFAULT_NORM_FLOOR });
        }
        let mut dot = 0.0;
        for i in 0..m.rows() {
            dot += (m.get(i, j) / norm) * upstream.get(i, j);
        }
        for i in 0..m.rows() {
            let unit = m.get(i, j) / norm;
            out.set(i, j, (upstream.get(i, j) - unit * dot) / norm);
        }
    }
    Ok(out)
}

fn column_norm(m: &Matrix, j: usize) -> f64 {
    (0..m.rows()).map(|i| m.get(i, j).powi(2)).sum::<f64>().sqrt()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            for j in 0..b.cols() {
                let v = out.get(i, j) + aik * b.get(k, j);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Backward pass of `C = A B`: returns `(dA, dB) = (G B^T, A^T G)`.
pub fn matmul_backward(upstream: &Matrix, a: &Matrix, b: &Matrix) -> Result<(Matrix, Matrix)> {
    if upstream.rows() != a.rows() || upstream.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "matmul backward: upstream {}x{} for {}x{} times {}x{}",
            upstream.rows(),
            upstream.cols(),
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let da = matmul(upstream, &b.transpose())?;
    let db = matmul(&a.transpose(), upstream)?;
    Ok((da, db))
}

/// Row-wise softmax of `temp * m`.
///
/// The temperature multiplies the scores before exponentiation (larger is
/// sharper); the row maximum is subtracted first for stability.
pub fn row_softmax(m: &Matrix, temp: f64) -> Result<Matrix> {
    if !(temp > 0.0) {
        return Err(Error::InvalidParam(format!("softmax temperature must be > 0, got {temp}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let row_max = m.row(i).iter().fold(f64::NEG_INFINITY, |a, &b| a.max(temp * b));
        let mut sum = 0.0;
        for j in 0..m.cols() {
            let e = (temp * m.get(i, j) - row_max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..m.cols() {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(out)
}

/// Backward pass of [`row_softmax`] given its `output` and the upstream
/// gradient: per row, `d/ds_j = temp * y_j (g_j - <g, y>)`.
pub fn row_softmax_backward(output: &Matrix, upstream: &Matrix, temp: f64) -> Result<Matrix> {
    if !(temp > 0.0) {
        return Err(Error::InvalidParam(format!("softmax temperature must be > 0, got {temp}")));
    }
    if output.rows() != upstream.rows() || output.cols() != upstream.cols() {
        return Err(Error::Shape("softmax backward: output/upstream shape mismatch".into()));
    }
    let mut out = Matrix::zeros(output.rows(), output.cols());
    for i in 0..output.rows() {
        let mut inner = 0.0;
        for j in 0..output.cols() {
            inner += upstream.get(i, j) * output.get(i, j);
        }
        for j in 0..output.cols() {
            out.set(i, j, temp * output.get(i, j) * (upstream.get(i, j) - inner));
        }
    }
    Ok(out)
}

/// Compares an analytic gradient against central finite differences.
///
/// Returns the maximum over entries of
/// `|central - analytic| / max(1, |analytic|)`.
pub fn finite_difference_check(
    f: impl Fn(&Matrix) -> f64,
    x: &Matrix,
    analytic: &Matrix,
    h: f64,
) -> Result<f64> {
    if x.rows() != analytic.rows() || x.cols() != analytic.cols() {
        return Err(Error::Shape("gradient check: analytic shape mismatch".into()));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = x.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("gradient check objective".into()));
        }
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data()[idx];
        let err = (central - a).abs() / f64::max(1.0, a.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
