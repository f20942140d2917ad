//! Dense row-major matrices and the handful of kernels the network needs.

use crate::error::{shape_err, Result};
use crate::real::Real;

/// A dense `rows × cols` matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<R = f32> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

/// A `frames × bins` spectrogram-like grid; the object the flow generates.
pub type MelGrid<R = f32> = Mat<R>;

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: R) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
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
    pub fn data(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> R {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: R) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<S: Real>(&self) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| S::c(x.f64())).collect(),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            shape_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ))
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: R) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks `top` above `bottom`.
    pub fn vcat(top: &Self, bottom: &Self) -> Result<Self> {
        if top.cols != bottom.cols {
            return shape_err(format!("vcat: {} vs {} columns", top.cols, bottom.cols));
        }
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Ok(Self { rows: top.rows + bottom.rows, cols: top.cols, data })
    }

    /// Places `left` and `right` side by side.
    pub fn hcat(left: &Self, right: &Self) -> Result<Self> {
        if left.rows != right.rows {
            return shape_err(format!("hcat: {} vs {} rows", left.rows, right.rows));
        }
        let cols = left.cols + right.cols;
        let mut data = Vec::with_capacity(left.rows * cols);
        for r in 0..left.rows {
            data.extend_from_slice(left.row(r));
            data.extend_from_slice(right.row(r));
        }
        Ok(Self { rows: left.rows, cols, data })
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> (Self, Self) {
        let mut left = Self::zeros(self.rows, at);
        let mut right = Self::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    pub fn mean_rows(&self) -> Vec<R> {
        let mut out = vec![R::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        let n = R::c(self.rows.max(1) as f64);
        for o in &mut out {
            *o /= n;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub(crate) fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<R: Real>(alpha: R, x: &[R], y: &mut [R]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `x[n×k] · w[k×m]` with `w` given as a flat row-major slice.
pub(crate) fn matmul<R: Real>(x: &Mat<R>, w: &[R], m: usize) -> Mat<R> {
    let k = x.cols();
    debug_assert_eq!(w.len(), k * m);
    let mut y = Mat::zeros(x.rows(), m);
    for i in 0..x.rows() {
        let xr = x.row(i);
        let yr = y.row_mut(i);
        for (p, &a) in xr.iter().enumerate() {
            if a != R::zero() {
                axpy(a, &w[p * m..(p + 1) * m], yr);
            }
        }
    }
    y
}

/// `dy[n×m] · w[k×m]ᵀ`.
pub(crate) fn matmul_wt<R: Real>(dy: &Mat<R>, w: &[R], k: usize) -> Mat<R> {
    let m = dy.cols();
    debug_assert_eq!(w.len(), k * m);
    let mut dx = Mat::zeros(dy.rows(), k);
    for i in 0..dy.rows() {
        let dyr = dy.row(i);
        let dxr = dx.row_mut(i);
        for (p, d) in dxr.iter_mut().enumerate() {
            *d = dot(dyr, &w[p * m..(p + 1) * m]);
        }
    }
    dx
}

/// `gw[k×m] += xᵀ[k×n] · dy[n×m]`.
pub(crate) fn acc_xt_dy<R: Real>(x: &Mat<R>, dy: &Mat<R>, gw: &mut [R]) {
    let m = dy.cols();
    debug_assert_eq!(gw.len(), x.cols() * m);
    for i in 0..x.rows() {
        let dyr = dy.row(i);
        for (p, &a) in x.row(i).iter().enumerate() {
            if a != R::zero() {
                axpy(a, dyr, &mut gw[p * m..(p + 1) * m]);
            }
        }
    }
}

/// `a[n×d] · b[t×d]ᵀ` (row dot products).
pub(crate) fn matmul_abt<R: Real>(a: &Mat<R>, b: &Mat<R>) -> Mat<R> {
    let mut out = Mat::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ar = a.row(i);
        for j in 0..b.rows() {
            out.set(i, j, dot(ar, b.row(j)));
        }
    }
    out
}

/// `a[n×t] · b[t×d]`.
pub(crate) fn matmul_ab<R: Real>(a: &Mat<R>, b: &Mat<R>) -> Mat<R> {
    matmul(a, b.data(), b.cols())
}

/// `a[t×n]ᵀ · b[t×d]`.
pub(crate) fn matmul_atb<R: Real>(a: &Mat<R>, b: &Mat<R>) -> Mat<R> {
    let mut out = Mat::zeros(a.cols(), b.cols());
    let d = b.cols();
    for i in 0..a.rows() {
        let br = b.row(i);
        for (p, &x) in a.row(i).iter().enumerate() {
            if x != R::zero() {
                axpy(x, br, &mut out.data_mut()[p * d..(p + 1) * d]);
            }
        }
    }
    out
}
