use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// Most of the crate treats a tensor as a batch of rows: the last dimension is
/// the feature dimension and every leading dimension is folded into the row
/// count. A 1-D tensor is a single row.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// 1-D tensor owning `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Stacks equally sized rows into an `rows.len() x width` matrix.
    pub fn from_rows(rows: &[Vec<f64>], width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::shape(format!("row {i} has length {}, expected {width}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), width, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows once leading dimensions are folded.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 { 0 } else { self.data.len() / c }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        let c = self.cols().max(1);
        self.data.chunks(c)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Same data viewed as an `rows x cols` matrix.
    pub fn as_matrix(&self) -> Self {
        Tensor { shape: vec![self.rows(), self.cols()], data: self.data.clone() }
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), c], data }
    }

    /// Repeats a single row `n` times.
    pub fn repeat_row(row: &[f64], n: usize) -> Self {
        let mut data = Vec::with_capacity(row.len() * n);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![n, row.len()], data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `a * self + b * other`, the workhorse of every sampler update.
    pub fn axpby(&self, a: f64, other: &Tensor, b: f64) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() { 0.0 } else { self.sum() / self.data.len() as f64 }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Column-wise mean of the rows.
    pub fn col_mean(&self) -> Vec<f64> {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for r in self.iter_rows() {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        let n = self.rows().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Horizontal concatenation of row-aligned tensors.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let rows = parts.first().map(|p| p.rows()).unwrap_or(0);
        if parts.iter().any(|p| p.rows() != rows) {
            return Err(Error::shape("concat_cols: row counts differ"));
        }
        let width: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Self::matrix(rows, width, data)
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols() {
            return Err(Error::shape(format!("slice {start}..{end} of width {}", self.cols())));
        }
        let mut data = Vec::with_capacity(self.rows() * (end - start));
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..end]);
        }
        Self::matrix(self.rows(), end - start, data)
    }

    pub(crate) fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.data.len() != other.data.len() || self.cols() != other.cols() {
            return Err(Error::shape(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} values]", self.data.len())
        }
    }
}

/// `x (n x k) * w (k x m)`, row-major.
pub(crate) fn matmul(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xr = &x[i * k..(i + 1) * k];
        let or = &mut out[i * m..(i + 1) * m];
        for (kk, &xv) in xr.iter().enumerate() {
            let wr = &w[kk * m..(kk + 1) * m];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// `x^T (k x n) * dy (n x m)`.
pub(crate) fn matmul_tn(x: &[f64], dy: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let xr = &x[i * k..(i + 1) * k];
        let dr = &dy[i * m..(i + 1) * m];
        for (kk, &xv) in xr.iter().enumerate() {
            let or = &mut out[kk * m..(kk + 1) * m];
            for (o, &d) in or.iter_mut().zip(dr) {
                *o += xv * d;
            }
        }
    }
    out
}

/// `dy (n x m) * w^T (m x k)` where `w` is stored `k x m`.
pub(crate) fn matmul_nt(dy: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let dr = &dy[i * m..(i + 1) * m];
        let or = &mut out[i * k..(i + 1) * k];
        for (kk, o) in or.iter_mut().enumerate() {
            let wr = &w[kk * m..(kk + 1) * m];
            *o = dr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rows_and_cols_fold_leading_dims() {
        let t = Tensor::zeros(&[2, 3, 4]);
        assert_eq!(t.cols(), 4);
        assert_eq!(t.rows(), 6);
        assert_eq!(Tensor::from_vec(vec![1.0, 2.0]).rows(), 1);
    }

    #[test]
    fn matmul_variants_agree_with_hand_values() {
        // x = [[1,2],[3,4]], w = [[5,6,7],[8,9,10]]
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
        assert_eq!(matmul(&x, &w, 2, 2, 3), vec![21.0, 24.0, 27.0, 47.0, 54.0, 61.0]);
        let dy = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        // x^T dy = [[1,3],[2,4]] * [[1,0,1],[0,1,0]]
        assert_eq!(matmul_tn(&x, &dy, 2, 2, 3), vec![1.0, 3.0, 1.0, 2.0, 4.0, 2.0]);
        // dy w^T: row0 = [5+7, 8+10], row1 = [6, 9]
        assert_eq!(matmul_nt(&dy, &w, 2, 2, 3), vec![12.0, 18.0, 6.0, 9.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice_cols(1, 3).unwrap(), b);
    }
}
