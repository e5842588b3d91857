//! Small dense real and complex matrices.
//!
//! Everything here is sized for n ≤ 8: row-major storage, no blocking, no
//! BLAS. Complex matrices are a pair of real matrices so that any manifold
//! point, real or complex, flattens into one real vector.
//!
//! QR, LU and the Padé exponential are written once over
//! [`ComplexFloat`] and instantiated for `f64` and [`Complex64`].

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::{Complex64, ComplexFloat};
use thiserror::Error;

/// Relative threshold below which an R diagonal counts as zero.
pub const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenseError {
    #[error("matrix is rank deficient (|r[{index}]| = {value:e})")]
    RankDeficient { index: usize, value: f64 },
    #[error("matrix is not positive definite (pivot {index} = {value:e})")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for RealMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "RealMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl RealMatrix {
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

    /// Wraps row-major `data`. Panics if the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_vec(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Self::from_vec(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Thin QR: `q` is rows×cols with orthonormal columns, `r` is cols×cols
    /// upper triangular with a positive diagonal.
    pub fn qr(&self) -> Result<(RealMatrix, RealMatrix), DenseError> {
        let (q, r) = qr_generic(self.rows, self.cols, &self.data)?;
        Ok((
            RealMatrix::from_vec(self.rows, self.cols, q),
            RealMatrix::from_vec(self.cols, self.cols, r),
        ))
    }

    pub fn determinant(&self) -> f64 {
        assert!(self.is_square(), "determinant of non-square matrix");
        lu_determinant(self.rows, self.data.clone())
    }

    /// Solves `self · x = b` for a square `self`.
    pub fn solve(&self, b: &RealMatrix) -> Result<RealMatrix, DenseError> {
        if !self.is_square() || b.rows != self.rows {
            return Err(DenseError::Shape(format!(
                "solve {}x{} against {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let x = lu_solve(self.rows, self.data.clone(), b.cols, b.data.clone())?;
        Ok(RealMatrix::from_vec(b.rows, b.cols, x))
    }

    pub fn inverse(&self) -> Result<RealMatrix, DenseError> {
        self.solve(&RealMatrix::identity(self.rows))
    }

    pub fn expm(&self) -> RealMatrix {
        assert!(self.is_square(), "exponential of non-square matrix");
        RealMatrix::from_vec(self.rows, self.cols, expm_generic(self.rows, &self.data))
    }

    /// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<RealMatrix, DenseError> {
        let (l, pivots) = cholesky_pivots(self);
        match pivots.iter().position(|p| *p <= 0.0) {
            Some(index) => Err(DenseError::NotPositiveDefinite {
                index,
                value: pivots[index],
            }),
            None => Ok(l),
        }
    }

    /// Smallest Cholesky pivot (the value whose square root becomes `L[i][i]`).
    /// Stops at the first non-positive pivot and returns it.
    pub fn min_cholesky_pivot(&self) -> f64 {
        let (_, pivots) = cholesky_pivots(self);
        pivots.into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Numerical rank by Gaussian elimination with complete pivoting.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let mut a = self.data.clone();
        let (rows, cols) = (self.rows, self.cols);
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0;
        }
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        let mut rank = 0;
        for _ in 0..rows.min(cols) {
            let mut best = (0.0, 0, 0);
            for r in (0..rows).filter(|r| !row_used[*r]) {
                for c in (0..cols).filter(|c| !col_used[*c]) {
                    let v = a[r * cols + c].abs();
                    if v > best.0 {
                        best = (v, r, c);
                    }
                }
            }
            let (piv, pr, pc) = best;
            if piv <= rel_tol * scale {
                break;
            }
            rank += 1;
            row_used[pr] = true;
            col_used[pc] = true;
            for r in (0..rows).filter(|r| !row_used[*r]) {
                let factor = a[r * cols + pc] / a[pr * cols + pc];
                for c in 0..cols {
                    a[r * cols + c] -= factor * a[pr * cols + c];
                }
            }
        }
        rank
    }
}

impl Index<(usize, usize)> for RealMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for RealMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

fn cholesky_pivots(a: &RealMatrix) -> (RealMatrix, Vec<f64>) {
    assert!(a.is_square(), "cholesky of non-square matrix");
    let n = a.rows;
    let mut l = RealMatrix::zeros(n, n);
    let mut pivots = Vec::with_capacity(n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        pivots.push(d);
        if d <= 0.0 || !d.is_finite() {
            return (l, pivots);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    (l, pivots)
}

/// Complex matrix stored as separate real and imaginary parts.
#[derive(Clone, PartialEq, Debug)]
pub struct ComplexMatrix {
    pub re: RealMatrix,
    pub im: RealMatrix,
}

impl ComplexMatrix {
    pub fn new(re: RealMatrix, im: RealMatrix) -> Self {
        assert_eq!((re.rows, re.cols), (im.rows, im.cols), "re/im shapes differ");
        Self { re, im }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(RealMatrix::zeros(rows, cols), RealMatrix::zeros(rows, cols))
    }

    pub fn identity(n: usize) -> Self {
        Self::new(RealMatrix::identity(n), RealMatrix::zeros(n, n))
    }

    pub fn from_real(re: RealMatrix) -> Self {
        let im = RealMatrix::zeros(re.rows, re.cols);
        Self::new(re, im)
    }

    /// Reads an n×n complex matrix from `[re (row-major) | im (row-major)]`.
    pub fn from_flat(rows: usize, cols: usize, flat: &[f64]) -> Self {
        let len = rows * cols;
        assert_eq!(flat.len(), 2 * len);
        Self::new(
            RealMatrix::from_vec(rows, cols, flat[..len].to_vec()),
            RealMatrix::from_vec(rows, cols, flat[len..].to_vec()),
        )
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.re.data.clone();
        out.extend_from_slice(&self.im.data);
        out
    }

    fn from_complex(rows: usize, cols: usize, values: &[Complex64]) -> Self {
        Self::new(
            RealMatrix::from_vec(rows, cols, values.iter().map(|z| z.re).collect()),
            RealMatrix::from_vec(rows, cols, values.iter().map(|z| z.im).collect()),
        )
    }

    fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .data
            .iter()
            .zip(&self.im.data)
            .map(|(r, i)| Complex64::new(*r, *i))
            .collect()
    }

    pub fn rows(&self) -> usize {
        self.re.rows
    }

    pub fn cols(&self) -> usize {
        self.re.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        Complex64::new(self.re[(r, c)], self.im[(r, c)])
    }

    pub fn set(&mut self, r: usize, c: usize, z: Complex64) {
        self.re[(r, c)] = z.re;
        self.im[(r, c)] = z.im;
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let rr = self.re.matmul(&other.re);
        let ii = self.im.matmul(&other.im);
        let ri = self.re.matmul(&other.im);
        let ir = self.im.matmul(&other.re);
        Self::new(rr.sub(&ii), ri.add(&ir))
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::new(self.re.transpose(), self.im.transpose().scale(-1.0))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.re.add(&other.re), self.im.add(&other.im))
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.re.sub(&other.re), self.im.sub(&other.im))
    }

    pub fn scale(&self, z: Complex64) -> Self {
        Self::new(
            self.re.scale(z.re).sub(&self.im.scale(z.im)),
            self.re.scale(z.im).add(&self.im.scale(z.re)),
        )
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.re.frobenius_norm().powi(2) + self.im.frobenius_norm().powi(2)).sqrt()
    }

    pub fn trace(&self) -> Complex64 {
        Complex64::new(self.re.trace(), self.im.trace())
    }

    pub fn qr(&self) -> Result<(ComplexMatrix, ComplexMatrix), DenseError> {
        let (rows, cols) = (self.rows(), self.cols());
        let (q, r) = qr_generic(rows, cols, &self.to_complex())?;
        Ok((
            Self::from_complex(rows, cols, &q),
            Self::from_complex(cols, cols, &r),
        ))
    }

    pub fn determinant(&self) -> Complex64 {
        assert_eq!(self.rows(), self.cols(), "determinant of non-square matrix");
        lu_determinant(self.rows(), self.to_complex())
    }

    pub fn expm(&self) -> ComplexMatrix {
        let n = self.rows();
        assert_eq!(n, self.cols(), "exponential of non-square matrix");
        let e = expm_generic(n, &self.to_complex());
        Self::from_complex(n, n, &e)
    }
}

fn frobenius<T: ComplexFloat<Real = f64>>(a: &[T]) -> f64 {
    a.iter().map(|v| v.abs() * v.abs()).sum::<f64>().sqrt()
}

/// Gram-Schmidt with one full reorthogonalization pass; keeps ‖QᴴQ − I‖ at
/// roundoff for the small sizes used here. The diagonal of R comes out real
/// and positive, which is the phase convention Haar sampling needs.
fn qr_generic<T: ComplexFloat<Real = f64>>(
    rows: usize,
    cols: usize,
    a: &[T],
) -> Result<(Vec<T>, Vec<T>), DenseError> {
    if rows < cols {
        return Err(DenseError::Shape(format!("qr needs rows >= cols, got {rows}x{cols}")));
    }
    let zero = T::zero();
    let norm_a = frobenius(a);
    // column-major scratch for Q
    let mut qcols: Vec<Vec<T>> = Vec::with_capacity(cols);
    let mut r = vec![zero; cols * cols];
    for j in 0..cols {
        let mut v: Vec<T> = (0..rows).map(|i| a[i * cols + j]).collect();
        for _pass in 0..2 {
            for (i, qi) in qcols.iter().enumerate() {
                let c = qi.iter().zip(&v).fold(zero, |s, (q, x)| s + q.conj() * *x);
                r[i * cols + j] = r[i * cols + j] + c;
                for (x, q) in v.iter_mut().zip(qi) {
                    *x = *x - c * *q;
                }
            }
        }
        let norm = frobenius(&v);
        if !(norm > RANK_TOL * norm_a) {
            return Err(DenseError::RankDeficient { index: j, value: norm });
        }
        r[j * cols + j] = T::from(norm).expect("real to scalar");
        let inv = T::from(1.0 / norm).expect("real to scalar");
        qcols.push(v.into_iter().map(|x| x * inv).collect());
    }
    let mut q = vec![zero; rows * cols];
    for (j, col) in qcols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            q[i * cols + j] = *v;
        }
    }
    Ok((q, r))
}

/// In-place LU with partial pivoting; returns the permutation sign or
/// `None` if an exactly zero pivot column was met.
fn lu_in_place<T: ComplexFloat<Real = f64>>(n: usize, a: &mut [T], perm: &mut [usize]) -> Option<f64> {
    let mut sign = 1.0;
    for (i, p) in perm.iter_mut().enumerate() {
        *p = i;
    }
    for k in 0..n {
        let (mut piv, mut best) = (k, a[k * n + k].abs());
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 {
            return None;
        }
        if piv != k {
            for c in 0..n {
                a.swap(k * n + c, piv * n + c);
            }
            perm.swap(k, piv);
            sign = -sign;
        }
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            a[i * n + k] = f;
            for c in k + 1..n {
                let u = a[k * n + c];
                a[i * n + c] = a[i * n + c] - f * u;
            }
        }
    }
    Some(sign)
}

fn lu_determinant<T: ComplexFloat<Real = f64>>(n: usize, mut a: Vec<T>) -> T {
    let mut perm = vec![0; n];
    match lu_in_place(n, &mut a, &mut perm) {
        None => T::zero(),
        Some(sign) => {
            let prod = (0..n).fold(T::one(), |p, i| p * a[i * n + i]);
            prod * T::from(sign).expect("real to scalar")
        }
    }
}

fn lu_solve<T: ComplexFloat<Real = f64>>(
    n: usize,
    mut a: Vec<T>,
    nrhs: usize,
    b: Vec<T>,
) -> Result<Vec<T>, DenseError> {
    let mut perm = vec![0; n];
    lu_in_place(n, &mut a, &mut perm).ok_or(DenseError::Singular)?;
    let mut x = vec![T::zero(); n * nrhs];
    for col in 0..nrhs {
        // forward substitution on the permuted right-hand side
        let mut y: Vec<T> = perm.iter().map(|&p| b[p * nrhs + col]).collect();
        for i in 0..n {
            for k in 0..i {
                y[i] = y[i] - a[i * n + k] * y[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                y[i] = y[i] - a[i * n + k] * y[k];
            }
            y[i] = y[i] / a[i * n + i];
        }
        for i in 0..n {
            x[i * nrhs + col] = y[i];
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(DenseError::Singular);
    }
    Ok(x)
}

fn matmul_sq<T: ComplexFloat<Real = f64>>(n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] = out[i * n + j] + aik * b[k * n + j];
            }
        }
    }
    out
}

/// Scaling and squaring with the diagonal (6,6) Padé approximant.
fn expm_generic<T: ComplexFloat<Real = f64>>(n: usize, a: &[T]) -> Vec<T> {
    const PADE6: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    if n == 0 {
        return Vec::new();
    }
    // infinity norm
    let norm = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scale = T::from(0.5f64.powi(squarings)).expect("real to scalar");
    let x: Vec<T> = a.iter().map(|v| *v * scale).collect();

    let mut numer = vec![T::zero(); n * n];
    let mut denom = vec![T::zero(); n * n];
    let mut power = vec![T::zero(); n * n];
    for i in 0..n {
        power[i * n + i] = T::one();
    }
    for (k, c) in PADE6.iter().enumerate() {
        if k > 0 {
            power = matmul_sq(n, &power, &x);
        }
        let c = T::from(*c).expect("real to scalar");
        let alt = if k % 2 == 0 { c } else { -c };
        for idx in 0..n * n {
            numer[idx] = numer[idx] + c * power[idx];
            denom[idx] = denom[idx] + alt * power[idx];
        }
    }
    let mut result = lu_solve(n, denom, n, numer).expect("Padé denominator is well conditioned after scaling");
    for _ in 0..squarings {
        result = matmul_sq(n, &result, &result);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> RealMatrix {
        RealMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    // Laplace expansion along the first row; independent of LU.
    fn cofactor_det(a: &RealMatrix) -> f64 {
        let n = a.rows();
        if n == 1 {
            return a[(0, 0)];
        }
        let mut det = 0.0;
        for c in 0..n {
            let mut minor = Vec::with_capacity((n - 1) * (n - 1));
            for r in 1..n {
                for cc in (0..n).filter(|cc| *cc != c) {
                    minor.push(a[(r, cc)]);
                }
            }
            let sign = if c % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * a[(0, c)] * cofactor_det(&RealMatrix::from_vec(n - 1, n - 1, minor));
        }
        det
    }

    #[test]
    fn qr_identity() {
        let (q, r) = RealMatrix::identity(3).qr().unwrap();
        assert_eq!(q, RealMatrix::identity(3));
        assert_eq!(r, RealMatrix::identity(3));
    }

    #[test]
    fn qr_permutation() {
        let a = RealMatrix::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let (q, r) = a.qr().unwrap();
        assert!(q.matmul(&r).sub(&a).frobenius_norm() < 1e-12);
        assert!(q.transpose().matmul(&q).sub(&RealMatrix::identity(2)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn qr_random_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random(4, 4, &mut rng);
            let (q, r) = a.qr().unwrap();
            assert!(q.matmul(&r).sub(&a).frobenius_norm() < 1e-10);
            for i in 0..4 {
                assert!(r[(i, i)] > 0.0);
                for j in 0..i {
                    assert_eq!(r[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn qr_tall_and_complex() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(5, 3, &mut rng);
        let (q, r) = a.qr().unwrap();
        assert!(q.matmul(&r).sub(&a).frobenius_norm() < 1e-12);
        assert!(q.transpose().matmul(&q).sub(&RealMatrix::identity(3)).frobenius_norm() < 1e-12);

        let c = ComplexMatrix::new(random(3, 3, &mut rng), random(3, 3, &mut rng));
        let (q, r) = c.qr().unwrap();
        assert!(q.matmul(&r).sub(&c).frobenius_norm() < 1e-12);
        assert!(q.adjoint().matmul(&q).sub(&ComplexMatrix::identity(3)).frobenius_norm() < 1e-12);
        for i in 0..3 {
            assert!(r.get(i, i).re > 0.0);
            assert_eq!(r.get(i, i).im, 0.0);
        }
    }

    #[test]
    fn qr_rank_deficient() {
        let a = RealMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert!(matches!(a.qr(), Err(DenseError::RankDeficient { index: 1, .. })));
    }

    #[test]
    fn determinant_examples() {
        assert_eq!(RealMatrix::identity(3).determinant(), 1.0);
        assert_eq!(RealMatrix::diag(&[2.0, 3.0]).determinant(), 6.0);
        assert_eq!(RealMatrix::zeros(3, 3).determinant(), 0.0);
    }

    #[test]
    fn determinant_matches_cofactor_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let a = random(5, 5, &mut rng);
            let (lu, cof) = (a.determinant(), cofactor_det(&a));
            assert!((lu - cof).abs() <= 1e-9 * cof.abs().max(1e-3), "{lu} vs {cof}");
        }
    }

    #[test]
    fn determinant_is_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (a, b) = (random(4, 4, &mut rng), random(4, 4, &mut rng));
            let lhs = a.matmul(&b).determinant();
            let rhs = a.determinant() * b.determinant();
            assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-12));
        }
    }

    #[test]
    fn complex_determinant() {
        // diag(i, 2) has determinant 2i
        let mut m = ComplexMatrix::zeros(2, 2);
        m.set(0, 0, Complex64::new(0.0, 1.0));
        m.set(1, 1, Complex64::new(2.0, 0.0));
        let d = m.determinant();
        assert!((d - Complex64::new(0.0, 2.0)).norm() < 1e-15);
    }

    #[test]
    fn expm_examples() {
        assert_eq!(RealMatrix::zeros(3, 3).expm(), RealMatrix::identity(3));

        let t = FRAC_PI_2;
        let a = RealMatrix::from_rows(&[&[0.0, t], &[-t, 0.0]]);
        let expected = RealMatrix::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        assert!(a.expm().sub(&expected).frobenius_norm() < 1e-10);

        // exp(t (E12 - E21)) = [[cos t, sin t], [-sin t, cos t]] ⊕ 1: rotation about z by -t
        let t = 0.7;
        let v3 = RealMatrix::from_rows(&[&[0.0, 1.0, 0.0], &[-1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let rot = RealMatrix::from_rows(&[
            &[t.cos(), t.sin(), 0.0],
            &[-t.sin(), t.cos(), 0.0],
            &[0.0, 0.0, 1.0],
        ]);
        assert!(v3.scale(t).expm().sub(&rot).frobenius_norm() < 1e-12);
    }

    #[test]
    fn expm_inverse_and_commuting_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let mut a = random(4, 4, &mut rng);
            let norm = a.frobenius_norm();
            a = a.scale(rng.random_range(0.1..10.0) / norm);
            let prod = a.expm().matmul(&a.scale(-1.0).expm());
            assert!(prod.sub(&RealMatrix::identity(4)).frobenius_norm() < 1e-10);

            let d1: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d2: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (RealMatrix::diag(&d1), RealMatrix::diag(&d2));
            let lhs = a.add(&b).expm();
            let rhs = a.expm().matmul(&b.expm());
            assert!(lhs.sub(&rhs).frobenius_norm() < 1e-10);
        }
    }

    #[test]
    fn complex_expm_of_phase() {
        // exp(iθ I) = e^{iθ} I
        let theta = 1.3;
        let a = ComplexMatrix::identity(2).scale(Complex64::new(0.0, theta));
        let e = a.expm();
        let expected = ComplexMatrix::identity(2).scale(Complex64::from_polar(1.0, theta));
        assert!(e.sub(&expected).frobenius_norm() < 1e-12);
    }

    #[test]
    fn cholesky_examples() {
        assert_eq!(RealMatrix::identity(2).cholesky().unwrap(), RealMatrix::identity(2));
        let l = RealMatrix::from_rows(&[&[4.0, 2.0], &[2.0, 5.0]]).cholesky().unwrap();
        assert_eq!(l, RealMatrix::from_rows(&[&[2.0, 0.0], &[1.0, 2.0]]));
        let err = RealMatrix::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]]).cholesky();
        assert!(matches!(err, Err(DenseError::NotPositiveDefinite { index: 1, .. })));
    }

    #[test]
    fn rank_and_inverse() {
        let a = RealMatrix::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[0.0, 1.0, 1.0]]);
        assert_eq!(a.rank(1e-10), 2);
        assert_eq!(RealMatrix::identity(4).rank(1e-10), 4);
        let b = RealMatrix::from_rows(&[&[4.0, 2.0], &[2.0, 5.0]]);
        let prod = b.matmul(&b.inverse().unwrap());
        assert!(prod.sub(&RealMatrix::identity(2)).frobenius_norm() < 1e-14);
        assert!(a.inverse().is_err());
    }
}
