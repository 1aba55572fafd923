//! Small dense linear algebra: row-major real matrices, the matrix
//! exponential, symmetric eigenvalues and LU solves.
//!
//! Everything here is sized for control problems with a handful of states;
//! nothing is blocked or vectorised beyond a cache-friendly `i-k-j` product.

use std::fmt;
use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("matrix is singular to working precision")]
    Singular,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major entries, rejecting empty shapes,
    /// length mismatches and non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Dimension(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows (the JSON config layout).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
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
            m[(i, i)] = 1.0;
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

    /// Column vector from a slice.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
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
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Nested-row view, the inverse of [`Matrix::from_rows`].
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Largest absolute entry.
    pub fn norm_max(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Matrix product. Zero entries of `self` are skipped, which makes
    /// products with sparse left factors (shift registers) cheap.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * n..(k + 1) * n];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * v` for a plain vector.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `out += self * v` without allocating.
    pub fn mul_vec_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, v.len());
        debug_assert_eq!(self.rows, out.len());
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(v) {
                acc += a * b;
            }
            *o += acc;
        }
    }

    /// `x' self x`.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert!(self.is_square() && self.rows == x.len());
        let mut acc = 0.0;
        for i in 0..self.rows {
            let row = self.row(i);
            let mut r = 0.0;
            for (a, b) in row.iter().zip(x) {
                r += a * b;
            }
            acc += x[i] * r;
        }
        acc
    }

    /// `M' self M`
    pub fn congruence(&self, m: &Matrix) -> Matrix {
        m.transpose().matmul(&self.matmul(m))
    }

    /// Copies `block` into `self` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            for j in 0..block.cols {
                self[(r0 + i, c0 + j)] = block[(i, j)];
            }
        }
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols);
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }

    /// Largest entrywise asymmetry `|m_ij - m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// In-place `(M + M')/2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs)
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out += rhs;
        out
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out -= rhs;
        out
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

impl AddAssign<&Matrix> for Matrix {
    fn add_assign(&mut self, rhs: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (rhs.rows, rhs.cols),
            "add shape mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&Matrix> for Matrix {
    fn sub_assign(&mut self, rhs: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (rhs.rows, rhs.cols),
            "sub shape mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

fn require_square(m: &Matrix, what: &str) -> Result<(), LinalgError> {
    if m.is_square() {
        Ok(())
    } else {
        Err(LinalgError::Dimension(format!(
            "{what} requires a square matrix, got {}x{}",
            m.rows, m.cols
        )))
    }
}

/// Padé(13) numerator coefficients (Higham 2005).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm bound below which Padé(13) is accurate to double precision.
const THETA_13: f64 = 5.371920351148152;

/// `e^{A t}` by scaling and squaring with a degree-13 Padé approximant.
pub fn mat_exp(a: &Matrix, t: f64) -> Result<Matrix, LinalgError> {
    require_square(a, "mat_exp")?;
    if !t.is_finite() {
        return Err(LinalgError::NonFinite("mat_exp time"));
    }
    let n = a.rows;
    let at = a.scale(t);
    if n == 1 {
        return Ok(Matrix::scalar(at.data[0].exp()));
    }
    let norm = at.norm_1();
    if norm == 0.0 {
        return Ok(Matrix::identity(n));
    }
    let squarings = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let x = at.scale(0.5f64.powi(squarings));
    let b = &PADE13;
    let ident = Matrix::identity(n);
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;

    let mut u_inner = x6.scale(b[13]);
    u_inner.add_scaled(b[11], &x4);
    u_inner.add_scaled(b[9], &x2);
    let mut u_outer = &x6 * &u_inner;
    u_outer.add_scaled(b[7], &x6);
    u_outer.add_scaled(b[5], &x4);
    u_outer.add_scaled(b[3], &x2);
    u_outer.add_scaled(b[1], &ident);
    let u = &x * &u_outer;

    let mut v_inner = x6.scale(b[12]);
    v_inner.add_scaled(b[10], &x4);
    v_inner.add_scaled(b[8], &x2);
    let mut v = &x6 * &v_inner;
    v.add_scaled(b[6], &x6);
    v.add_scaled(b[4], &x4);
    v.add_scaled(b[2], &x2);
    v.add_scaled(b[0], &ident);

    let p = &v + &u;
    let q = &v - &u;
    let mut r = solve(&q, &p)?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if !r.is_finite() {
        return Err(LinalgError::NonFinite("mat_exp result"));
    }
    Ok(r)
}

/// `∫_0^t e^{A s} ds`, read off the upper-right block of a 2n×2n exponential.
pub fn mat_exp_integral(a: &Matrix, t: f64) -> Result<Matrix, LinalgError> {
    require_square(a, "mat_exp_integral")?;
    let n = a.rows;
    let mut big = Matrix::zeros(2 * n, 2 * n);
    big.set_block(0, 0, a);
    big.set_block(0, n, &Matrix::identity(n));
    let e = mat_exp(&big, t)?;
    Ok(e.block(0, n, n, n))
}

/// `∫_0^t e^{A' s} W e^{A s} ds` via Van Loan's block exponential.
pub fn gramian_integral(a: &Matrix, w: &Matrix, t: f64) -> Result<Matrix, LinalgError> {
    require_square(a, "gramian_integral")?;
    let n = a.rows;
    if (w.rows, w.cols) != (n, n) {
        return Err(LinalgError::Dimension("gramian weight must match A".into()));
    }
    let mut big = Matrix::zeros(2 * n, 2 * n);
    big.set_block(0, 0, &(-&a.transpose()));
    big.set_block(0, n, w);
    big.set_block(n, n, a);
    let e = mat_exp(&big, t)?;
    let f22 = e.block(n, n, n, n);
    let g12 = e.block(0, n, n, n);
    let mut out = f22.transpose().matmul(&g12);
    out.symmetrize();
    Ok(out)
}

/// `(M + M')/2`.
pub fn sym_part(m: &Matrix) -> Result<Matrix, LinalgError> {
    require_square(m, "sym_part")?;
    let mut out = m.clone();
    out.symmetrize();
    Ok(out)
}

/// All eigenvalues of a symmetric matrix (ascending) by cyclic Jacobi
/// rotations. The input is symmetrised first.
pub fn symmetric_eigenvalues(m: &Matrix) -> Result<Vec<f64>, LinalgError> {
    require_square(m, "symmetric_eigenvalues")?;
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("eigenvalue input"));
    }
    let n = m.rows;
    let mut a = sym_part(m)?;
    let scale = a.norm_max();
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[(i, j)] * a[(i, j)];
            }
        }
        s.sqrt()
    };
    let mut converged = n == 1;
    for _sweep in 0..100 {
        if off(&a) <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    if !converged && off(&a) > 1e-12 * scale {
        return Err(LinalgError::NoConvergence);
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64, LinalgError> {
    Ok(symmetric_eigenvalues(m)?[0])
}

/// Solves `A X = B` by LU with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    require_square(a, "solve")?;
    if b.rows != a.rows {
        return Err(LinalgError::Dimension(format!(
            "solve: rhs has {} rows, system has {}",
            b.rows, a.rows
        )));
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.norm_max().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let (piv, pmax) =
            (col..n)
                .map(|r| (r, lu[(r, col)].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pmax <= 1e-14 * scale {
            return Err(LinalgError::Singular);
        }
        if piv != col {
            for j in 0..n {
                lu.data.swap(col * n + j, piv * n + j);
            }
            for j in 0..x.cols {
                x.data.swap(col * x.cols + j, piv * x.cols + j);
            }
        }
        let d = lu[(col, col)];
        for r in (col + 1)..n {
            let f = lu[(r, col)] / d;
            if f == 0.0 {
                continue;
            }
            lu[(r, col)] = 0.0;
            for j in (col + 1)..n {
                lu[(r, j)] -= f * lu[(col, j)];
            }
            for j in 0..x.cols {
                let v = x[(col, j)];
                x[(r, j)] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[(col, col)];
        for j in 0..x.cols {
            let mut v = x[(col, j)];
            for k in (col + 1)..n {
                v -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = v / d;
        }
    }
    Ok(x)
}

pub fn inverse(a: &Matrix) -> Result<Matrix, LinalgError> {
    require_square(a, "inverse")?;
    solve(a, &Matrix::identity(a.rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn max_diff(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm_max()
    }

    #[test]
    fn constructor_rejects_bad_shapes() {
        assert!(Matrix::new(0, 1, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn exp_at_zero_time_is_identity() {
        let a = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        assert_eq!(mat_exp(&a, 0.0).unwrap(), Matrix::identity(2));
    }

    #[test]
    fn exp_of_nilpotent_is_polynomial() {
        let a = m(&[&[0.0, 1.0], &[0.0, 0.0]]);
        for theta in [0.3, -1.7, 12.0] {
            let e = mat_exp(&a, theta).unwrap();
            assert!(max_diff(&e, &m(&[&[1.0, theta], &[0.0, 1.0]])) < 1e-12);
        }
    }

    #[test]
    fn exp_scalar() {
        let e = mat_exp(&Matrix::scalar(1.0), 2f64.ln()).unwrap();
        assert!((e[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn exp_rotation_generator() {
        // e^{[[0,-w],[w,0]] t} is a rotation by w t.
        let a = m(&[&[0.0, -1.0], &[1.0, 0.0]]);
        let t = 7.5; // large enough to force squaring
        let e = mat_exp(&a, t).unwrap();
        let expect = m(&[&[t.cos(), -t.sin()], &[t.sin(), t.cos()]]);
        assert!(max_diff(&e, &expect) < 1e-12);
    }

    #[test]
    fn exp_diagonalisable_relative_accuracy() {
        // A = V diag(-1, 2) V^{-1}
        let v = m(&[&[1.0, 1.0], &[1.0, 2.0]]);
        let vinv = inverse(&v).unwrap();
        let d = m(&[&[-1.0, 0.0], &[0.0, 2.0]]);
        let a = &(&v * &d) * &vinv;
        let t = 3.0f64;
        let ed = m(&[&[(-t).exp(), 0.0], &[0.0, (2.0 * t).exp()]]);
        let expect = &(&v * &ed) * &vinv;
        let got = mat_exp(&a, t).unwrap();
        assert!(max_diff(&got, &expect) / expect.norm_max() < 1e-12);
    }

    #[test]
    fn exp_rejects_non_square() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(mat_exp(&a, 1.0), Err(LinalgError::Dimension(_))));
    }

    #[test]
    fn exp_integral_scalar() {
        let got = mat_exp_integral(&Matrix::scalar(-1.0), 1.0).unwrap();
        assert!((got[(0, 0)] - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn gramian_matches_fine_quadrature() {
        let a = m(&[&[-0.3, 1.0], &[-0.5, 0.2]]);
        let w = m(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let t = 0.8;
        let got = gramian_integral(&a, &w, t).unwrap();
        // composite Simpson with 400 panels
        let n = 400;
        let h = t / n as f64;
        let mut acc = Matrix::zeros(2, 2);
        for k in 0..=n {
            let s = k as f64 * h;
            let e = mat_exp(&a, s).unwrap();
            let term = w.congruence(&e);
            let c = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc.add_scaled(c * h / 3.0, &term);
        }
        assert!(max_diff(&got, &acc) < 1e-10);
    }

    #[test]
    fn sym_part_examples() {
        let s = m(&[&[1.0, 2.0], &[2.0, 5.0]]);
        assert_eq!(sym_part(&s).unwrap(), s);
        assert_eq!(
            sym_part(&m(&[&[0.0, 2.0], &[0.0, 0.0]])).unwrap(),
            m(&[&[0.0, 1.0], &[1.0, 0.0]])
        );
        assert_eq!(sym_part(&Matrix::zeros(3, 3)).unwrap(), Matrix::zeros(3, 3));
        assert!(sym_part(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn min_eigenvalue_examples() {
        assert!((min_eigenvalue(&Matrix::identity(4)).unwrap() - 1.0).abs() < 1e-14);
        assert!((min_eigenvalue(&m(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(min_eigenvalue(&Matrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(min_eigenvalue(&Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn eigenvalues_of_known_spectrum() {
        // Q diag(3, -2, 0.5) Q' with Q a rotation in the (0,2) plane.
        let (c, s) = (0.6, 0.8);
        let q = m(&[&[c, 0.0, -s], &[0.0, 1.0, 0.0], &[s, 0.0, c]]);
        let d = m(&[&[3.0, 0.0, 0.0], &[0.0, -2.0, 0.0], &[0.0, 0.0, 0.5]]);
        let a = &(&q * &d) * &q.transpose();
        let eig = symmetric_eigenvalues(&a).unwrap();
        for (got, want) in eig.iter().zip([-2.0, 0.5, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_and_singular() {
        let a = m(&[&[0.0, 2.0], &[1.0, 1.0]]);
        let b = m(&[&[2.0], &[3.0]]);
        let x = solve(&a, &b).unwrap();
        assert!(max_diff(&x, &m(&[&[2.0], &[1.0]])) < 1e-15);
        assert_eq!(
            solve(&m(&[&[1.0, 2.0], &[2.0, 4.0]]), &b),
            Err(LinalgError::Singular)
        );
    }

    fn small_matrix() -> impl Strategy<Value = Matrix> {
        (1usize..=4).prop_flat_map(|n| {
            proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
                let raw = Matrix::new(n, n, v).unwrap();
                // keep the 1-norm at most 2
                let nrm = raw.norm_1();
                if nrm > 2.0 {
                    raw.scale(2.0 / nrm)
                } else {
                    raw
                }
            })
        })
    }

    proptest! {
        #[test]
        fn exp_semigroup(a in small_matrix(), s in 0.0f64..2.0, t in 0.0f64..2.0) {
            let lhs = mat_exp(&a, s + t).unwrap();
            let rhs = &mat_exp(&a, s).unwrap() * &mat_exp(&a, t).unwrap();
            prop_assert!(max_diff(&lhs, &rhs) < 1e-10);
        }

        #[test]
        fn exp_inverse(a in small_matrix(), t in -2.0f64..2.0) {
            let prod = &mat_exp(&a, t).unwrap() * &mat_exp(&a, -t).unwrap();
            prop_assert!(max_diff(&prod, &Matrix::identity(a.rows())) < 1e-10);
        }

        #[test]
        fn min_eig_invariant_under_symmetrisation(a in small_matrix()) {
            let s = sym_part(&a).unwrap();
            let once = min_eigenvalue(&s).unwrap();
            let twice = min_eigenvalue(&sym_part(&s).unwrap()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
