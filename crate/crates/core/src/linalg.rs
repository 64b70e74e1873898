//! Dense `f64` matrices and vectors, a one-sided Jacobi SVD, the
//! Moore–Penrose pseudoinverse and the norms used by the layer.
//!
//! Matrices are small here (the largest pseudoinverse is `min(m, n_out) x
//! n_out`), so everything is plain row-major storage with straightforward
//! loops. The SVD is deterministic for a fixed input: sweep order is fixed and
//! no randomness or threading is involved.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{Error, Result};

/// Default relative rank threshold: singular values at or below
/// `DEFAULT_RANK_TOL * sigma_max` are treated as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Row-major dense matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("Matrix::new", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::dim("Matrix::matmul", self.cols, rhs.rows));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, r) in orow.iter_mut().zip(rrow) {
                    *o += a * r;
                }
            }
        }
        Ok(out)
    }

    /// `self * v`
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::dim("Matrix::mul_vec", self.cols, v.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T * v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::dim("Matrix::tr_mul_vec", self.rows, v.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            axpy(*vi, self.row(i), &mut out);
        }
        Ok(out)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::dim(
                "Matrix::sub",
                self.rows * self.cols,
                rhs.rows * rhs.cols,
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Induced infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Rows selected by `indices` (0-based), in the given order.
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
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Dense vector with finite entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vector"));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
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

/// Order `p >= 1` of a vector norm. `f64::INFINITY` selects the max norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormOrder(f64);

impl NormOrder {
    pub const L1: NormOrder = NormOrder(1.0);
    pub const L2: NormOrder = NormOrder(2.0);

    pub fn new(p: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "norm order must be >= 1, got {p}"
            )));
        }
        Ok(Self(p))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for NormOrder {
    type Error = Error;
    fn try_from(p: f64) -> Result<Self> {
        NormOrder::new(p)
    }
}

impl From<NormOrder> for f64 {
    fn from(p: NormOrder) -> f64 {
        p.0
    }
}

/// `(sum |v_i|^p)^(1/p)`.
pub fn vec_pnorm(v: &[f64], p: NormOrder) -> f64 {
    let p = p.0;
    if p == 1.0 {
        return v.iter().map(|x| x.abs()).sum();
    }
    if p == 2.0 {
        return libm::sqrt(v.iter().map(|x| x * x).sum());
    }
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 || p.is_infinite() {
        return scale;
    }
    let s: f64 = v.iter().map(|x| libm::pow(x.abs() / scale, p)).sum();
    scale * libm::pow(s, 1.0 / p)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Thin singular value decomposition `A = U diag(s) V^T`.
///
/// For an `m x n` input with `r = min(m, n)`: `u` is `m x r`, `v` is `n x r`
/// and `singular` holds `r` values in non-increasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular: Vec<f64>,
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows < a.cols {
        let t = svd_tall(&a.transpose())?;
        return Ok(Svd {
            u: t.v,
            singular: t.singular,
            v: t.u,
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = (a.rows, a.cols);
    // column-major working copies
    let mut w = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            w[j * m + i] = a[(i, j)];
        }
    }
    let mut v = vec![0.0; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    // columns this small relative to the whole matrix are rounding noise;
    // rotating them against each other never settles
    let negligible = dot(&w, &w) * 1e-28;
    // below a few ulps a rotation no longer changes the columns
    let orth_tol = f64::EPSILON * (m as f64).max(4.0);
    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let (cp, cq) = (&w[p * m..(p + 1) * m], &w[q * m..(q + 1) * m]);
                let alpha = dot(cp, cp);
                let beta = dot(cq, cq);
                let gamma = dot(cp, cq);
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= orth_tol * libm::sqrt(alpha * beta)
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_columns(&mut w, m, p, q, c, s);
                rotate_columns(&mut v, n, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::SvdNonConvergence { rows: m, cols: n });
    }

    let mut sigma: Vec<(usize, f64)> = (0..n)
        .map(|j| {
            let c = &w[j * m..(j + 1) * m];
            (j, libm::sqrt(dot(c, c)))
        })
        .collect();
    // stable: ties keep column order
    sigma.sort_by(|x, y| y.1.total_cmp(&x.1));

    let mut u_out = Matrix::zeros(m, n);
    let mut v_out = Matrix::zeros(n, n);
    let mut singular = Vec::with_capacity(n);
    for (k, &(j, s)) in sigma.iter().enumerate() {
        singular.push(s);
        if s > 0.0 {
            for i in 0..m {
                u_out[(i, k)] = w[j * m + i] / s;
            }
        }
        for i in 0..n {
            v_out[(i, k)] = v[j * n + i];
        }
    }
    Ok(Svd {
        u: u_out,
        singular,
        v: v_out,
    })
}

#[inline]
fn rotate_columns(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = buf.split_at_mut(q * len);
    let cp = &mut lo[p * len..(p + 1) * len];
    let cq = &mut hi[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Moore–Penrose pseudoinverse via SVD. Singular values at or below
/// `rank_tol * sigma_max` are dropped.
pub fn pinv(a: &Matrix, rank_tol: f64) -> Result<Matrix> {
    pinv_with_rank(a, rank_tol).map(|(p, _)| p)
}

/// Pseudoinverse together with the numerical rank it was built from.
pub fn pinv_with_rank(a: &Matrix, rank_tol: f64) -> Result<(Matrix, usize)> {
    if !(rank_tol > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!(
            "rank_tol must be positive, got {rank_tol}"
        )));
    }
    let dec = svd(a)?;
    let sigma_max = dec.singular.first().copied().unwrap_or(0.0);
    let cutoff = rank_tol * sigma_max;
    let mut out = Matrix::zeros(a.cols, a.rows);
    let mut rank = 0;
    for (k, &s) in dec.singular.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        rank += 1;
        let inv = 1.0 / s;
        for i in 0..a.cols {
            let vik = dec.v[(i, k)] * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..a.rows {
                out[(i, j)] += vik * dec.u[(j, k)];
            }
        }
    }
    Ok((out, rank))
}

/// Largest singular value.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.singular.first().copied().unwrap_or(0.0))
}

/// Numerical rank at the given relative tolerance.
pub fn rank(a: &Matrix, rank_tol: f64) -> Result<usize> {
    let dec = svd(a)?;
    let sigma_max = dec.singular.first().copied().unwrap_or(0.0);
    Ok(dec
        .singular
        .iter()
        .filter(|&&s| s > 0.0 && s > rank_tol * sigma_max)
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn svd_settles_when_rotations_stop_helping() {
        // one pair stalls at an off-diagonal ratio just above machine epsilon
        let a = Matrix::from_rows(&[
            [-0.024538758000403893, 0.21262115683221505, -0.12016435114748591, -0.12033842979061693],
            [0.5079831074307235, -1.4756629638800933, -1.6887453660003844, 1.1895159259234427],
            [0.5884972305789957, -0.36761184879220543, 0.3582859689667175, 0.2693526400813974],
            [-0.287721769072356, 1.182212808462251, -0.11082074870883804, -1.9323492006962217],
        ])
        .unwrap();
        let d = svd(&a).unwrap();
        let us = Matrix::from_fn(4, 4, |i, k| d.u[(i, k)] * d.singular[k]);
        let back = us.matmul(&d.v.transpose()).unwrap();
        assert!(back.sub(&a).unwrap().max_abs() < 1e-13);
    }

    fn assert_mat_eq(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = tol);
        }
    }

    #[test]
    fn pinv_identity() {
        let i3 = Matrix::identity(3);
        assert_mat_eq(&pinv(&i3, DEFAULT_RANK_TOL).unwrap(), &i3, 1e-14);
    }

    #[test]
    fn pinv_zero_matrix_is_zero_transpose_shape() {
        let z = Matrix::zeros(2, 3);
        let p = pinv(&z, DEFAULT_RANK_TOL).unwrap();
        assert_eq!((p.rows(), p.cols()), (3, 2));
        assert!(p.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pinv_scalar() {
        let a = Matrix::from_rows(&[[2.0]]).unwrap();
        assert_abs_diff_eq!(pinv(&a, DEFAULT_RANK_TOL).unwrap()[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn pinv_wide_row() {
        // [0 1]^+ = [0 1]^T
        let a = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let p = pinv(&a, DEFAULT_RANK_TOL).unwrap();
        assert_mat_eq(&p, &Matrix::from_rows(&[[0.0], [1.0]]).unwrap(), 1e-15);
    }

    #[test]
    fn pinv_duplicate_rows() {
        // rank one: [[1,1],[1,1]]^+ = [[1,1],[1,1]] / 4
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let p = pinv(&a, DEFAULT_RANK_TOL).unwrap();
        assert_mat_eq(&p, &Matrix::from_fn(2, 2, |_, _| 0.25), 1e-14);
    }

    #[test]
    fn pinv_rejects_bad_tolerance() {
        assert!(pinv(&Matrix::identity(2), 0.0).is_err());
        assert!(pinv(&Matrix::identity(2), f64::NAN).is_err());
    }

    #[test]
    fn spectral_norm_examples() {
        assert_abs_diff_eq!(spectral_norm(&Matrix::diag(&[3.0, 1.0])).unwrap(), 3.0, epsilon = 1e-14);
        assert_abs_diff_eq!(spectral_norm(&Matrix::identity(5)).unwrap(), 1.0, epsilon = 1e-14);
        let nil = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(spectral_norm(&nil).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn pnorm_examples() {
        assert_abs_diff_eq!(vec_pnorm(&[3.0, 4.0], NormOrder::L2), 5.0);
        assert_abs_diff_eq!(vec_pnorm(&[1.0, -1.0, 1.0], NormOrder::L1), 3.0);
        for p in [1.0, 1.5, 2.0, 3.0, 7.0, f64::INFINITY] {
            assert_eq!(vec_pnorm(&[0.0; 4], NormOrder::new(p).unwrap()), 0.0);
        }
        assert_abs_diff_eq!(
            vec_pnorm(&[1.0, 2.0, 2.0], NormOrder::new(3.0).unwrap()),
            libm::cbrt(17.0),
            epsilon = 1e-14
        );
        assert_eq!(vec_pnorm(&[1.0, -4.0, 2.0], NormOrder::new(f64::INFINITY).unwrap()), 4.0);
    }

    #[test]
    fn norm_order_rejects_below_one() {
        assert!(NormOrder::new(0.5).is_err());
        assert!(NormOrder::new(f64::NAN).is_err());
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn svd_reconstructs() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let d = svd(&a).unwrap();
        let us = Matrix::from_fn(2, 2, |i, j| d.u[(i, j)] * d.singular[j]);
        let rec = us.matmul(&d.v.transpose()).unwrap();
        assert_mat_eq(&rec, &a, 1e-12);
        assert!(d.singular[0] >= d.singular[1]);
    }

    #[test]
    fn rank_counts_dependent_rows() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [-1.0, -2.0]]).unwrap();
        assert_eq!(rank(&a, DEFAULT_RANK_TOL).unwrap(), 1);
    }
}
