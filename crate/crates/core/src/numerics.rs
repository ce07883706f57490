//! Dense vectors and matrices plus the handful of elementwise kernels the
//! network is built from.
//!
//! Everything is `f64` and row-major. Gated cells call the slice kernels
//! (`gemv_into`, `gemv_t_add`, `add_outer`) directly so they can reuse
//! buffers; the owning `Vector`/`Matrix` types are what cross module
//! boundaries.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Largest `f64` strictly below one.
pub(crate) const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty or non-finite data.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::shape("vector must have at least one entry"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                coordinate: i,
                value: data[i],
            });
        }
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    /// Wraps data that the caller already knows to be valid.
    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        Vector(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::shape(format!(
                "dot of vectors with lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(self, other))
    }

    pub fn scale(&self, by: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * by).collect())
    }

    pub fn concat(parts: &[&[f64]]) -> Vector {
        Vector::from_vec(parts.concat())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                coordinate: i,
                value: data[i],
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// `self · x` for a vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matrix {}x{} times vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        gemv_into(self, x, &mut out);
        Ok(Vector::from_vec(out))
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul of left operand {}x{} with right operand {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(a.data[i * a.cols + k], b.row(k), dst);
        }
    }
    Ok(out)
}

/// Logistic function, saturating to the open interval (0, 1).
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

#[inline]
pub fn tanh_scalar(x: f64) -> f64 {
    x.tanh().clamp(-BELOW_ONE, BELOW_ONE)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Vector) -> Vector {
    Vector(x.iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn tanh_act(x: &Vector) -> Vector {
    Vector(x.iter().map(|&v| tanh_scalar(v)).collect())
}

pub fn softmax(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(Vector(out))
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x = (*x / total).max(f64::MIN_POSITIVE);
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(f: F, params: &[f64], epsilon: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + epsilon;
        let hi = f(&p);
        p[k] = orig - epsilon;
        let lo = f(&p);
        p[k] = orig;
        for value in [hi, lo] {
            if !value.is_finite() {
                return Err(Error::Numeric { coordinate: k, value });
            }
        }
        grad.push((hi - lo) / (2.0 * epsilon));
    }
    if grad.is_empty() {
        return Err(Error::shape("finite differences over zero parameters"));
    }
    Ok(Vector(grad))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = m · x`
#[inline]
pub(crate) fn gemv_into(m: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, x.len());
    debug_assert_eq!(m.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), x);
    }
}

/// `out += mᵀ · y`
#[inline]
pub(crate) fn gemv_t_add(m: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.rows, y.len());
    debug_assert_eq!(m.cols, out.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, m.row(r), out);
        }
    }
}

/// `m += y ⊗ x`
#[inline]
pub(crate) fn add_outer(m: &mut Matrix, y: &[f64], x: &[f64]) {
    debug_assert_eq!(m.rows, y.len());
    debug_assert_eq!(m.cols, x.len());
    for (r, &yr) in y.iter().enumerate() {
        if yr != 0.0 {
            axpy(yr, x, m.row_mut(r));
        }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching unit eigenvectors.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Vec<Vector>)> {
    let n = a.rows;
    if a.cols != n {
        return Err(Error::shape(format!(
            "eigen-decomposition needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let mut m = a.data.clone();
    let mut v = Matrix::identity(n).data;
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| Vector((0..n).map(|k| v[k * n + i]).collect()))
        .collect();
    Ok((values, vectors))
}
