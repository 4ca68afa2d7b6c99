//! Dense row-major matrices and the least-squares solver used for FFN
//! reconstruction.
//!
//! Storage is `f32`; every reduction (dot products, Gram matrices, the
//! Cholesky factorization) accumulates in `f64` in a fixed order, so results
//! are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DataLength { rows, cols, len: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{rows}x{cols} matrix")));
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

    /// Convenience constructor for small literal matrices.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DataLength { rows: rows.len(), cols, len: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f32).collect())
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, factor: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Keeps the listed columns, in the listed order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Self { rows: self.rows, cols: cols.len(), data }
    }

    /// Keeps the listed rows, in the listed order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), cols: self.cols, data }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.len()).sum());
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::Shape { op: "vstack", left: (rows, cols), right: m.shape() });
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Self { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape { op: "add", left: self.shape(), right: other.shape() });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Largest absolute entry, 0 for an empty matrix.
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// `a · b` with one `f64` accumulator per output entry, summed over the
/// inner index in ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape { op: "matmul", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.rows, b.cols);
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            // Zero terms add nothing to a finite sum; skipping them keeps
            // masked and physically removed heads on the same bit path.
            if aik == 0.0 {
                continue;
            }
            let aik = aik as f64;
            for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *s += aik * bkj as f64;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Ok(Matrix { rows: m, cols: n, data: out })
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape { op: "matmul_tn", left: a.shape(), right: b.shape() });
    }
    let (m, n) = (a.cols, b.cols);
    let mut acc = vec![0.0f64; m * n];
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let ari = ari as f64;
            for (s, &brj) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += ari * brj as f64;
            }
        }
    }
    Matrix::from_f64(m, n, &acc)
}

/// `a · bᵀ`; same accumulation order as [`matmul`] against the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape { op: "matmul_nt", left: a.shape(), right: b.shape() });
    }
    matmul(a, &b.transpose())
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Squared L2 norm of every column.
pub fn column_sq_norms(x: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0f64; x.cols];
    for r in 0..x.rows {
        for (s, &v) in out.iter_mut().zip(x.row(r)) {
            let v = v as f64;
            *s += v * v;
        }
    }
    out
}

/// `‖x · w − target‖²_F` accumulated in `f64`.
pub fn residual_sq(x: &Matrix, w: &Matrix, target: &Matrix) -> Result<f64> {
    if x.cols != w.rows {
        return Err(Error::Shape { op: "residual", left: x.shape(), right: w.shape() });
    }
    if (x.rows, w.cols) != target.shape() {
        return Err(Error::Shape { op: "residual", left: (x.rows, w.cols), right: target.shape() });
    }
    let n = w.cols;
    let mut acc = vec![0.0f64; n];
    let mut total = 0.0f64;
    for i in 0..x.rows {
        acc.fill(0.0);
        for (k, &xik) in x.row(i).iter().enumerate() {
            let xik = xik as f64;
            for (s, &wkj) in acc.iter_mut().zip(w.row(k)) {
                *s += xik * wkj as f64;
            }
        }
        for (p, &t) in acc.iter().zip(target.row(i)) {
            let d = p - t as f64;
            total += d * d;
        }
    }
    Ok(total)
}

/// Result of [`solve_normal_equations`].
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSolution {
    pub weights: Matrix,
    /// Ridge actually used for the successful factorization.
    pub ridge: f64,
    /// How many times the ridge had to be raised.
    pub escalations: u32,
}

/// Maximum number of ×10 ridge increases before giving up.
pub const MAX_RIDGE_ESCALATIONS: u32 = 6;

/// Pivots at or below this fraction of the largest diagonal entry count as a
/// failed factorization.
const PIVOT_TOLERANCE: f64 = 1e-12;

/// Solves `(xpᵀ xp + ridge·I) W = xpᵀ target` for `W` by Cholesky.
///
/// If the Gram matrix is not numerically positive definite, the ridge is
/// raised geometrically (×10) starting at `max(ridge, 1e-8 · mean diagonal)`,
/// at most [`MAX_RIDGE_ESCALATIONS`] times.
pub fn solve_normal_equations(xp: &Matrix, target: &Matrix, ridge: f64) -> Result<RidgeSolution> {
    if xp.rows != target.rows {
        return Err(Error::Shape { op: "solve_normal_equations", left: xp.shape(), right: target.shape() });
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidPruneConfig(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    let p = xp.cols;
    let m2 = target.cols;
    let gram = gram(xp);
    let rhs = matmul_tn_f64(xp, target);

    let mean_diag = if p == 0 { 0.0 } else { (0..p).map(|i| gram[i * p + i]).sum::<f64>() / p as f64 };

    let mut current = ridge;
    let mut escalations = 0u32;
    let mut base = ridge.max(1e-8 * mean_diag);
    if base == 0.0 {
        base = 1e-8;
    }
    loop {
        if let Some(factor) = cholesky(&gram, p, current) {
            let mut w = vec![0.0f64; p * m2];
            let mut col = vec![0.0f64; p];
            for j in 0..m2 {
                for i in 0..p {
                    col[i] = rhs[i * m2 + j];
                }
                cholesky_solve(&factor, p, &mut col);
                for i in 0..p {
                    w[i * m2 + j] = col[i];
                }
            }
            if w.iter().all(|v| v.is_finite() && v.abs() <= f32::MAX as f64) {
                return Ok(RidgeSolution {
                    weights: Matrix::from_f64(p, m2, &w)?,
                    ridge: current,
                    escalations,
                });
            }
        }
        if escalations >= MAX_RIDGE_ESCALATIONS {
            return Err(Error::Singular { ridge: current });
        }
        current = base * 10f64.powi(escalations as i32);
        escalations += 1;
    }
}

/// Upper triangle mirrored; accumulation runs over rows in order.
fn gram(x: &Matrix) -> Vec<f64> {
    let p = x.cols;
    let mut g = vec![0.0f64; p * p];
    let mut row64 = vec![0.0f64; p];
    for r in 0..x.rows {
        for (d, &v) in row64.iter_mut().zip(x.row(r)) {
            *d = v as f64;
        }
        for i in 0..p {
            let xi = row64[i];
            if xi == 0.0 {
                continue;
            }
            for (s, &xj) in g[i * p + i..(i + 1) * p].iter_mut().zip(&row64[i..]) {
                *s += xi * xj;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            g[i * p + j] = g[j * p + i];
        }
    }
    g
}

fn matmul_tn_f64(a: &Matrix, b: &Matrix) -> Vec<f64> {
    let (m, n) = (a.cols, b.cols);
    let mut acc = vec![0.0f64; m * n];
    for r in 0..a.rows {
        let brow = b.row(r);
        for (i, &ari) in a.row(r).iter().enumerate() {
            if ari == 0.0 {
                continue;
            }
            let ari = ari as f64;
            for (s, &brj) in acc[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *s += ari * brj as f64;
            }
        }
    }
    acc
}

/// Lower Cholesky factor of `a + ridge·I`, or `None` if a pivot collapses.
fn cholesky(a: &[f64], n: usize, ridge: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    let max_diag = (0..n).map(|i| a[i * n + i] + ridge).fold(0.0f64, f64::max);
    let tol = PIVOT_TOLERANCE * max_diag;
    for j in 0..n {
        let lj = &l[j * n..j * n + j];
        let d = a[j * n + j] + ridge - lj.iter().map(|v| v * v).sum::<f64>();
        if !(d > tol) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            l[i * n + j] = (a[i * n + j] - s) / djj;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` in place.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * b[k]).sum();
        b[i] = (b[i] - s) / l[i * n + i];
    }
}
