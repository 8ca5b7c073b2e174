//! Dense row-major `f32` matrices and the handful of kernels the toy U-Net needs.
//!
//! Every reduction accumulates in ascending index order, so results are
//! bit-identical across runs and independent of how many rows a matrix has:
//! row `i` of an output only ever depends on row `i` of the row-wise inputs.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Shape(format!(
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

    /// Builds a matrix whose every row is `row`.
    pub fn repeat_row(row: &[f32], rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * row.len());
        for _ in 0..rows {
            data.extend_from_slice(row);
        }
        Self {
            rows,
            cols: row.len(),
            data,
        }
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

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    /// Copies columns `start..end` into a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols, "column block out of range");
        let width = end - start;
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[start..end]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_column_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        assert!(start + block.cols <= self.cols, "column block out of range");
        for i in 0..self.rows {
            let dst = &mut self.data[i * self.cols + start..i * self.cols + start + block.cols];
            dst.copy_from_slice(block.row(i));
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, factor: f32) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&self, row: &[f32]) -> Result<Matrix> {
        if row.len() != self.cols {
            return Err(Error::Shape(format!(
                "broadcast row has {} columns, matrix has {}",
                row.len(),
                self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..out.rows {
            for (v, r) in out.row_mut(i).iter_mut().zip(row) {
                *v += r;
            }
        }
        Ok(out)
    }

    /// Euclidean norm of the whole matrix, accumulated in `f64`.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// Standard matrix product. Each output element sums over the inner index in
/// ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    Ok(Matrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer normalisation without an affine transform.
pub fn layernorm_rows(a: &Matrix, eps: f32) -> Matrix {
    let mut out = a.clone();
    let n = a.cols as f32;
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let mut mean = 0.0f32;
        for &v in row.iter() {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0f32;
        for &v in row.iter() {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Selects rows of `a` in `idx` order.
pub fn gather_rows(a: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * a.cols);
    for &i in idx {
        if i >= a.rows {
            return Err(Error::Index {
                index: i,
                len: a.rows,
            });
        }
        data.extend_from_slice(a.row(i));
    }
    Ok(Matrix {
        rows: idx.len(),
        cols: a.cols,
        data,
    })
}

/// Adds row `k` of `src` into row `idx[k]` of a copy of `a`, for ascending `k`.
pub fn scatter_add_rows(a: &Matrix, idx: &[usize], src: &Matrix) -> Result<Matrix> {
    if src.rows != idx.len() || src.cols != a.cols {
        return Err(Error::Shape(format!(
            "scatter_add: {} indices with a {}x{} source into {} columns",
            idx.len(),
            src.rows,
            src.cols,
            a.cols
        )));
    }
    let mut out = a.clone();
    for (k, &i) in idx.iter().enumerate() {
        if i >= a.rows {
            return Err(Error::Index {
                index: i,
                len: a.rows,
            });
        }
        for (o, s) in out.row_mut(i).iter_mut().zip(src.row(k)) {
            *o += s;
        }
    }
    Ok(out)
}
