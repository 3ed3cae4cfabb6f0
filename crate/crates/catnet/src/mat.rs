//! Dense row-major matrices and the handful of multiply kernels the
//! autodiff engine is built on.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in
//! `f64` for gradient verification and `f32` for training throughput.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display};

/// Floating-point element type for matrices and graphs.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Send + Sync + Debug + Display + Default + 'static
{
    /// Convert an `f64` constant; panics only on NaN-free literal misuse.
    #[inline]
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant conversion")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> F) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transposed(&self) -> Mat<F> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Lossy elementwise conversion to another scalar type.
    pub fn convert<G: Scalar>(&self) -> Mat<G> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| G::c(v.to_f64_lossy())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<F> Debug for Mat<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat[{}x{}]", self.rows, self.cols)
    }
}

/// `c += a * b` with `a: [m x k]`, `b: [k x n]`, `c: [m x n]`, all row-major.
///
/// The k-outer / j-inner loop streams rows of `b` and autovectorizes.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// `c += a * b^T` with `a: [m x k]`, `b: [n x k]`, `c: [m x n]`.
///
/// `b` is transposed into a scratch buffer first; the dot-product form is
/// several times slower than the streaming kernel for the shapes used here.
pub fn matmul_nt_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut bt = vec![F::zero(); k * n];
    for r in 0..n {
        for p in 0..k {
            bt[p * n + r] = b[r * k + p];
        }
    }
    matmul_acc(a, &bt, c, m, k, n);
}

/// `c += a^T * b` with `a: [p x m]`, `b: [p x n]`, `c: [m x n]`.
///
/// Rank-1 accumulation over the shared leading dimension; the inner loop
/// runs over contiguous rows of `b`.
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], c: &mut [F], p: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let ari = arow[i];
            if ari == F::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += ari * brow[j];
            }
        }
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_and_tn_match_naive() {
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.13).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.29).cos()).collect();
        // build b = bt^T so a*bt^T == naive(a, b)
        let mut b = vec![0.0; k * n];
        for r in 0..n {
            for p in 0..k {
                b[p * n + r] = bt[r * k + p];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut c, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T * b with a: [p x m]
        let (p2, m2, n2) = (6, 4, 3);
        let a2: Vec<f64> = (0..p2 * m2).map(|i| (i as f64 * 0.17).sin()).collect();
        let b2: Vec<f64> = (0..p2 * n2).map(|i| (i as f64 * 0.23).cos()).collect();
        let mut at = vec![0.0; m2 * p2];
        for r in 0..p2 {
            for i in 0..m2 {
                at[i * p2 + r] = a2[r * m2 + i];
            }
        }
        let mut c2 = vec![0.0; m2 * n2];
        matmul_tn_acc(&a2, &b2, &mut c2, p2, m2, n2);
        let want2 = naive(&at, &b2, m2, p2, n2);
        for (x, y) in c2.iter().zip(want2.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let m = Mat::<f64>::from_fn(3, 4, |r, c| (r * 10 + c) as f64);
        assert_eq!(m.transposed().transposed(), m);
    }
}

/// Xavier/Glorot uniform initialization.
pub fn xavier<F: Scalar>(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Mat<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = F::c(rng.gen_range(-limit..limit));
    }
    m
}
