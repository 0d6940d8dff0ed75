//! Dense row-major matrices and the regularized least-squares solve.
//!
//! Every closed-form update in the training protocols reduces to
//! `(gram + reg·I)⁻¹ · cross`, where `gram = XᵀX` and `cross = XᵀZ` are
//! accumulated batch by batch into a [`LayerStats`].

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of `f64`, stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 64 {
            f.debug_struct("Matrix")
                .field("rows", &self.rows)
                .field("cols", &self.cols)
                .field("data", &self.data)
                .finish()
        } else {
            write!(f, "Matrix({}x{})", self.rows, self.cols)
        }
    }
}

impl Matrix {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Reinterprets the buffer with a new shape of equal size.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.data)
    }

    /// Copies the listed rows, in the listed order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Repeats every row `times` times in place (row 0 ×times, row 1 ×times, ...).
    pub fn repeat_rows(&self, times: usize) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for i in 0..self.rows {
            for _ in 0..times {
                data.extend_from_slice(self.row(i));
            }
        }
        Matrix {
            rows: self.rows * times,
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(format!(
                    "vstack of {} and {} columns",
                    cols, p.cols
                )));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("{what} contains NaN or infinity")))
        }
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op} of {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }
}

/// `‖a − b‖_F / ‖b‖_F`, or the absolute distance when `b` is zero.
pub fn relative_frobenius(a: &Matrix, b: &Matrix) -> Result<f64> {
    let diff = a.sub(b)?.frobenius_norm();
    let scale = b.frobenius_norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// `c = alpha·op(a)·b + beta·c` on raw row-major buffers.
///
/// `a_transposed` selects `op(a) = aᵀ`, in which case `a` is stored `k × m`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    // SAFETY: every buffer covers the strided region handed to dgemm; the
    // callers check shapes before getting here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul of {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, 0.0, &mut c.data);
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut c = Matrix::zeros(a.cols, b.cols);
    matmul_tn_acc(a, b, &mut c)?;
    Ok(c)
}

/// `c += aᵀ · b`.
pub fn matmul_tn_acc(a: &Matrix, b: &Matrix, c: &mut Matrix) -> Result<()> {
    if a.rows != b.rows || c.rows != a.cols || c.cols != b.cols {
        return Err(Error::shape(format!(
            "transposed product of {}x{} and {}x{} into {}x{}",
            a.rows, a.cols, b.rows, b.cols, c.rows, c.cols
        )));
    }
    gemm(a.cols, a.rows, b.cols, &a.data, true, &b.data, 1.0, &mut c.data);
    Ok(())
}

/// `A = L·D·Lᵀ` factorization of a symmetric positive-definite matrix, with
/// `L` unit lower triangular and `D` diagonal.
///
/// This is the square-root-free form of Cholesky; on small diagonal systems
/// it reproduces exact quotients.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    lower: Matrix,
    diag: Vec<f64>,
}

impl SpdFactor {
    /// Factors `a`, reading only its lower triangle.
    pub fn new(a: &Matrix) -> Result<SpdFactor> {
        let n = a.rows;
        if a.cols != n {
            return Err(Error::shape(format!("factorization of {}x{}", a.rows, a.cols)));
        }
        let mut lower = Matrix::identity(n);
        let mut diag = vec![0.0; n];
        // scaled[k] = L[i][k]·D[k] for the row being built
        let mut scaled = vec![0.0; n];
        for i in 0..n {
            let (done, rest) = lower.data.split_at_mut(i * n);
            let row_i = &mut rest[..n];
            for j in 0..i {
                let row_j = &done[j * n..j * n + j];
                let dot: f64 = scaled[..j].iter().zip(row_j).map(|(x, y)| x * y).sum();
                let lij = (a.get(i, j) - dot) / diag[j];
                row_i[j] = lij;
                scaled[j] = lij * diag[j];
            }
            let d = a.get(i, i) - scaled[..i].iter().zip(&row_i[..i]).map(|(x, y)| x * y).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::numeric(format!(
                    "matrix is not positive definite (pivot {i} = {d:e})"
                )));
            }
            diag[i] = d;
        }
        Ok(SpdFactor { lower, diag })
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// Solves `A·X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::shape(format!(
                "factor is {n}x{n} but right-hand side has {} rows",
                b.rows
            )));
        }
        let m = b.cols;
        let l = &self.lower;
        let mut y = b.clone();
        // L·Y = B
        for i in 0..n {
            let (done, rest) = y.data.split_at_mut(i * m);
            let yi = &mut rest[..m];
            for k in 0..i {
                let lik = l.get(i, k);
                if lik != 0.0 {
                    for (a, b) in yi.iter_mut().zip(&done[k * m..(k + 1) * m]) {
                        *a -= lik * b;
                    }
                }
            }
        }
        for (i, d) in self.diag.iter().enumerate() {
            for a in y.row_mut(i) {
                *a /= d;
            }
        }
        // Lᵀ·X = D⁻¹·Y
        for i in (0..n).rev() {
            let (head, done) = y.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            for k in i + 1..n {
                let lki = l.get(k, i);
                if lki != 0.0 {
                    for (a, b) in xi.iter_mut().zip(&done[(k - i - 1) * m..(k - i) * m]) {
                        *a -= lki * b;
                    }
                }
            }
        }
        Ok(y)
    }
}

fn check_symmetric(gram: &Matrix) -> Result<()> {
    let n = gram.rows;
    let scale = gram.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (gram.get(i, j), gram.get(j, i));
            if (a - b).abs() > 1e-9 * scale {
                return Err(Error::domain(format!(
                    "gram matrix is not symmetric at ({i}, {j}): {a} vs {b}"
                )));
            }
        }
    }
    Ok(())
}

/// Computes `(gram + reg·I)⁻¹ · cross` through an LDLᵀ factorization.
pub fn solve_regularized_ls(gram: &Matrix, cross: &Matrix, reg: f64) -> Result<Matrix> {
    if gram.rows != gram.cols {
        return Err(Error::shape(format!(
            "gram must be square, got {}x{}",
            gram.rows, gram.cols
        )));
    }
    if cross.rows != gram.rows {
        return Err(Error::shape(format!(
            "gram is {}x{} but cross has {} rows",
            gram.rows, gram.cols, cross.rows
        )));
    }
    if !reg.is_finite() {
        return Err(Error::numeric(format!("regularizer is {reg}")));
    }
    if reg <= 0.0 {
        return Err(Error::domain(format!("regularizer must be positive, got {reg}")));
    }
    gram.ensure_finite("gram")?;
    cross.ensure_finite("cross")?;
    check_symmetric(gram)?;

    let mut a = gram.clone();
    for i in 0..a.rows {
        let v = a.get(i, i) + reg;
        a.set(i, i, v);
    }
    let w = SpdFactor::new(&a)?.solve(cross)?;
    w.ensure_finite("solution")?;
    Ok(w)
}

/// The per-layer sufficient statistics a client uploads: `gram = XᵀX` and
/// `cross = XᵀZ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub gram: Matrix,
    pub cross: Matrix,
}

impl LayerStats {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LayerStats {
            gram: Matrix::zeros(in_dim, in_dim),
            cross: Matrix::zeros(in_dim, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.gram.rows
    }

    pub fn out_dim(&self) -> usize {
        self.cross.cols
    }

    /// Adds `xᵀx` and `xᵀz` of one batch.
    pub fn accumulate(&mut self, x: &Matrix, z: &Matrix) -> Result<()> {
        if x.rows != z.rows {
            return Err(Error::shape(format!(
                "batch has {} input rows but {} target rows",
                x.rows, z.rows
            )));
        }
        if x.cols != self.in_dim() || z.cols != self.out_dim() {
            return Err(Error::shape(format!(
                "batch dims ({}, {}) do not match stats dims ({}, {})",
                x.cols,
                z.cols,
                self.in_dim(),
                self.out_dim()
            )));
        }
        matmul_tn_acc(x, x, &mut self.gram)?;
        matmul_tn_acc(x, z, &mut self.cross)?;
        Ok(())
    }

    /// Adds another client's (or batch's) statistics.
    pub fn merge(&mut self, other: &LayerStats) -> Result<()> {
        self.gram.add_assign(&other.gram)?;
        self.cross.add_assign(&other.cross)
    }

    /// Number of `f64` values carried by an upload of these stats.
    pub fn payload_len(&self) -> usize {
        self.gram.data.len() + self.cross.data.len()
    }
}

/// Functional form of [`LayerStats::accumulate`].
pub fn accumulate_stats(mut stats: LayerStats, x: &Matrix, z: &Matrix) -> Result<LayerStats> {
    stats.accumulate(x, z)?;
    Ok(stats)
}
