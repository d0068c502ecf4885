//! Dense row-major float64 matrices and LU factorization.
//!
//! Everything in the model is two-dimensional: vectors are `1×n` or `n×1`
//! and scalars are `1×1`.

use std::fmt;

use crate::error::{Error, Result};

/// Singularity threshold: `|det(A)|` below this fraction of the product of
/// column magnitudes is treated as singular.
pub const SINGULAR_RELATIVE_DET: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Tensor {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Tensor::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("tensor", format!("zero extent {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "tensor",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Tensor::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Tensor {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn col_vector(values: &[f64]) -> Self {
        Tensor {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] += value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// The single value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Rows `range` of `self` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        Tensor {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// LU factorization with partial pivoting, `P·A = L·U` packed in one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    packed: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        if a.rows() != a.cols() {
            return Err(Error::shape("lu", format!("non-square {:?}", a.shape())));
        }
        let n = a.rows();
        let mut m = a.as_slice().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;

        // Product of column magnitudes bounds |det| (Hadamard) and sets the scale.
        let mut scale = 1.0;
        for j in 0..n {
            scale *= (0..n).fold(0.0f64, |acc, i| acc.max(m[i * n + j].abs()));
        }

        for k in 0..n {
            let mut p = k;
            let mut best = m[k * n + k].abs();
            for i in k + 1..n {
                let v = m[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 {
                return Err(Error::Singular { instance: None });
            }
            if p != k {
                for j in 0..n {
                    m.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = m[k * n + k];
            for i in k + 1..n {
                let factor = m[i * n + k] / pivot;
                m[i * n + k] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        m[i * n + j] -= factor * m[k * n + j];
                    }
                }
            }
        }

        let lu = Lu {
            n,
            packed: m,
            perm,
            sign,
        };
        // Compare in log space so that large matrices do not overflow.
        let log_det = lu.log_abs_det();
        if !(scale > 0.0) || !log_det.is_finite() || log_det < scale.ln() + SINGULAR_RELATIVE_DET.ln() {
            return Err(Error::Singular { instance: None });
        }
        Ok(lu)
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|k| self.packed[k * self.n + k].abs().ln())
            .sum()
    }

    /// Sign of the determinant, `±1`.
    pub fn det_sign(&self) -> f64 {
        let negatives = (0..self.n)
            .filter(|&k| self.packed[k * self.n + k] < 0.0)
            .count();
        if negatives % 2 == 0 {
            self.sign
        } else {
            -self.sign
        }
    }

    pub fn det(&self) -> f64 {
        self.det_sign() * self.log_abs_det().exp()
    }

    fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        let permuted: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        b.copy_from_slice(&permuted);
        for i in 0..n {
            let mut acc = b[i];
            for j in 0..i {
                acc -= self.packed[i * n + j] * b[j];
            }
            b[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..n {
                acc -= self.packed[i * n + j] * b[j];
            }
            b[i] = acc / self.packed[i * n + i];
        }
    }

    pub fn inverse(&self) -> Tensor {
        let n = self.n;
        let mut inv = Tensor::zeros(n, n);
        let mut col = vec![0.0; n];
        for j in 0..n {
            col.fill(0.0);
            col[j] = 1.0;
            self.solve_in_place(&mut col);
            for (i, v) in col.iter().enumerate() {
                inv.set(i, j, *v);
            }
        }
        inv
    }
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    Ok(Lu::factor(a)?.inverse())
}
