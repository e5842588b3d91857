//! Embedded manifolds, their generating sets and base measures.
//!
//! Every point is a flat real vector in the ambient space:
//!
//! | manifold        | layout                               | D          |
//! |-----------------|--------------------------------------|------------|
//! | `Sphere(n)`     | x ∈ R^{n+1}                          | n+1        |
//! | `SO(n)`         | n×n row-major                        | n²         |
//! | `U(n)`, `SU(n)` | re (n×n row-major) then im           | 2n²        |
//! | `Stiefel(m,n)`  | n×m row-major                        | nm         |
//! | `SPD(n)`        | upper triangle, row-major, k ≤ j     | n(n+1)/2   |
//!
//! Generators are written as ambient formulas, so they are defined (and
//! differentiable) on the whole ambient space, not only on the manifold.
//! The flow solver and the adjoint rely on that extension.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use thiserror::Error;

use crate::densemat::{ComplexMatrix, RealMatrix};

/// Constraint residual above which `retract` refuses to project.
pub const RETRACT_TRUST_RADIUS: f64 = 1e-1;
/// Points closer than this are already on the manifold; `retract` returns
/// them untouched so that retraction is idempotent.
pub const ON_MANIFOLD_TOL: f64 = 1e-13;
/// Minimum Cholesky pivot an SPD state may have during a flow.
pub const SPD_MIN_PIVOT: f64 = 1e-10;

pub type AmbientVector = Vec<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("cannot parse manifold {0:?} (expected sphere:n, so:n, u:n, su:n, stiefel:m:n or spd:n[:beta])")]
    Parse(String),
    #[error("invalid manifold size: {0}")]
    InvalidSize(String),
    #[error("generator index {index} out of range (count {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("expected {expected} ambient coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point too far from manifold to retract (residual {residual:e})")]
    TooFar { residual: f64 },
    #[error("SPD state lost positive definiteness (min pivot {pivot:e})")]
    PositivityLost { pivot: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ManifoldKind {
    Sphere { n: usize },
    SpecialOrthogonal { n: usize },
    Unitary { n: usize },
    SpecialUnitary { n: usize },
    /// Orthonormal m-frames in R^n, m < n.
    Stiefel { m: usize, n: usize },
    /// Symmetric positive definite n×n matrices. `beta` is the degrees of
    /// freedom of the Wishart initial density.
    Spd { n: usize, beta: f64 },
    /// Flat R^n with the coordinate fields as generators and a standard
    /// Gaussian initial density. Used as a reference fixture.
    Euclidean { n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub ambient_dim: usize,
    pub gen_count: usize,
    pub intrinsic_dim: usize,
}

impl ManifoldSpec {
    pub fn new(kind: ManifoldKind) -> Result<Self, ManifoldError> {
        use ManifoldKind::*;
        let bad = |msg: String| Err(ManifoldError::InvalidSize(msg));
        let (ambient_dim, gen_count, intrinsic_dim) = match kind {
            Sphere { n } if n >= 1 => (n + 1, n + 1, n),
            SpecialOrthogonal { n } if n >= 2 => (n * n, n * (n - 1) / 2, n * (n - 1) / 2),
            Unitary { n } if n >= 1 => (2 * n * n, n * n, n * n),
            SpecialUnitary { n } if n >= 2 => (2 * n * n, n * n - 1, n * n - 1),
            Stiefel { m, n } if m >= 1 && m < n => (n * m, n * (n - 1) / 2, n * m - m * (m + 1) / 2),
            Spd { n, beta } if n >= 1 => {
                if !(beta >= (n + 1) as f64) || beta.fract() != 0.0 {
                    return bad(format!("spd:{n} needs an integer beta >= {}, got {beta}", n + 1));
                }
                (n * (n + 1) / 2, n * n, n * (n + 1) / 2)
            }
            Euclidean { n } if n >= 1 => (n, n, n),
            other => return bad(format!("{other:?}")),
        };
        Ok(Self {
            kind,
            ambient_dim,
            gen_count,
            intrinsic_dim,
        })
    }

    pub fn sphere(n: usize) -> Self {
        Self::new(ManifoldKind::Sphere { n }).expect("valid sphere")
    }

    pub fn so(n: usize) -> Self {
        Self::new(ManifoldKind::SpecialOrthogonal { n }).expect("valid SO(n)")
    }

    pub fn u(n: usize) -> Self {
        Self::new(ManifoldKind::Unitary { n }).expect("valid U(n)")
    }

    pub fn su(n: usize) -> Self {
        Self::new(ManifoldKind::SpecialUnitary { n }).expect("valid SU(n)")
    }

    pub fn stiefel(m: usize, n: usize) -> Self {
        Self::new(ManifoldKind::Stiefel { m, n }).expect("valid Stiefel(m,n)")
    }

    pub fn spd(n: usize, beta: f64) -> Self {
        Self::new(ManifoldKind::Spd { n, beta }).expect("valid SPD(n)")
    }

    /// Parses `sphere:n`, `so:n`, `u:n`, `su:n`, `stiefel:m:n`, `spd:n` or
    /// `spd:n:beta`. A bare `spd:n` takes its Wishart degrees of freedom from
    /// `spd_beta`.
    pub fn parse(s: &str, spd_beta: Option<f64>) -> Result<Self, ManifoldError> {
        let err = || ManifoldError::Parse(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<usize, ManifoldError> {
            parts.get(i).ok_or_else(err)?.parse::<usize>().map_err(|_| err())
        };
        let kind = match (parts[0], parts.len()) {
            ("sphere", 2) => ManifoldKind::Sphere { n: num(1)? },
            ("so", 2) => ManifoldKind::SpecialOrthogonal { n: num(1)? },
            ("u", 2) => ManifoldKind::Unitary { n: num(1)? },
            ("su", 2) => ManifoldKind::SpecialUnitary { n: num(1)? },
            ("stiefel", 3) => ManifoldKind::Stiefel {
                m: num(1)?,
                n: num(2)?,
            },
            ("spd", 2) => ManifoldKind::Spd {
                n: num(1)?,
                beta: spd_beta.ok_or_else(err)?,
            },
            ("spd", 3) => ManifoldKind::Spd {
                n: num(1)?,
                beta: parts[2].parse::<f64>().map_err(|_| err())?,
            },
            ("euclidean", 2) => ManifoldKind::Euclidean { n: num(1)? },
            _ => return Err(err()),
        };
        Self::new(kind)
    }

    pub fn is_complex(&self) -> bool {
        matches!(
            self.kind,
            ManifoldKind::Unitary { .. } | ManifoldKind::SpecialUnitary { .. }
        )
    }

    /// Matrix side length for the matrix manifolds (n for Sphere(n)).
    pub fn n(&self) -> usize {
        match self.kind {
            ManifoldKind::Sphere { n }
            | ManifoldKind::SpecialOrthogonal { n }
            | ManifoldKind::Unitary { n }
            | ManifoldKind::SpecialUnitary { n }
            | ManifoldKind::Stiefel { n, .. }
            | ManifoldKind::Spd { n, .. }
            | ManifoldKind::Euclidean { n } => n,
        }
    }

    fn check_len(&self, coords: &[f64]) -> Result<(), ManifoldError> {
        if coords.len() != self.ambient_dim {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.ambient_dim,
                got: coords.len(),
            });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<(), ManifoldError> {
        if i >= self.gen_count {
            return Err(ManifoldError::IndexOutOfRange {
                index: i,
                count: self.gen_count,
            });
        }
        Ok(())
    }

    /// Distance-like measure of how far `coords` is from the manifold.
    pub fn constraint_residual(&self, coords: &[f64]) -> f64 {
        assert_eq!(coords.len(), self.ambient_dim);
        match self.kind {
            ManifoldKind::Sphere { .. } => (norm(coords) - 1.0).abs(),
            ManifoldKind::Euclidean { .. } => 0.0,
            ManifoldKind::SpecialOrthogonal { n } => {
                let q = RealMatrix::from_vec(n, n, coords.to_vec());
                let gram = q.transpose().matmul(&q).sub(&RealMatrix::identity(n));
                gram.frobenius_norm() + (q.determinant() - 1.0).abs()
            }
            ManifoldKind::Stiefel { m, n } => {
                let q = RealMatrix::from_vec(n, m, coords.to_vec());
                q.transpose().matmul(&q).sub(&RealMatrix::identity(m)).frobenius_norm()
            }
            ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                let q = ComplexMatrix::from_flat(n, n, coords);
                let gram = q.adjoint().matmul(&q).sub(&ComplexMatrix::identity(n));
                let mut r = gram.frobenius_norm();
                if matches!(self.kind, ManifoldKind::SpecialUnitary { .. }) {
                    r += (q.determinant() - Complex64::new(1.0, 0.0)).norm();
                }
                r
            }
            ManifoldKind::Spd { n, .. } => {
                if spd_matrix(n, coords).min_cholesky_pivot() <= 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }

    pub fn check_constraint(&self, p: &Point) -> f64 {
        self.constraint_residual(&p.coords)
    }

    /// Writes generator `i` evaluated at ambient `x` into `out`.
    pub fn generator_into(&self, x: &[f64], i: usize, out: &mut [f64]) {
        debug_assert!(i < self.gen_count);
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            ManifoldKind::Euclidean { .. } => out[i] = 1.0,
            ManifoldKind::Sphere { .. } => {
                let xi = x[i];
                for (o, xk) in out.iter_mut().zip(x) {
                    *o = -xi * xk;
                }
                out[i] += 1.0;
            }
            ManifoldKind::SpecialOrthogonal { n } => {
                for e in real_skew_entries(n, i) {
                    // (A v)[:, c] += A[:, k] * val
                    for r in 0..n {
                        out[r * n + e.col] += x[r * n + e.row] * e.val.re;
                    }
                }
            }
            ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                let special = matches!(self.kind, ManifoldKind::SpecialUnitary { .. });
                let nn = n * n;
                for e in complex_basis_entries(n, special, i).iter() {
                    for r in 0..n {
                        let (ar, ai) = (x[r * n + e.row], x[nn + r * n + e.row]);
                        out[r * n + e.col] += ar * e.val.re - ai * e.val.im;
                        out[nn + r * n + e.col] += ar * e.val.im + ai * e.val.re;
                    }
                }
            }
            ManifoldKind::Stiefel { m, n } => {
                let (k, j) = skew_pair(n, i);
                // rows: (VQ)[k] = Q[j], (VQ)[j] = -Q[k]
                for c in 0..m {
                    out[k * m + c] = x[j * m + c];
                    out[j * m + c] = -x[k * m + c];
                }
            }
            ManifoldKind::Spd { n, .. } => {
                let (k, j) = (i / n, i % n);
                let q = |r: usize, s: usize| x[tri_index(n, r.min(s), r.max(s))];
                // S = E_jk Q + Q E_kj; S[r][s] = δ_rj Q[k][s] + Q[r][k] δ_sj
                for r in 0..n {
                    for s in r..n {
                        let mut v = 0.0;
                        if r == j {
                            v += q(k, s);
                        }
                        if s == j {
                            v += q(r, k);
                        }
                        out[tri_index(n, r, s)] = v;
                    }
                }
            }
        }
    }

    /// Generator `i` at `p`, checked.
    pub fn eval_generator(&self, p: &Point, i: usize) -> Result<AmbientVector, ManifoldError> {
        self.check_index(i)?;
        self.check_len(&p.coords)?;
        let mut out = vec![0.0; self.ambient_dim];
        self.generator_into(&p.coords, i, &mut out);
        Ok(out)
    }

    /// All generators at `x`, as `gen_count` rows of length D.
    pub fn generators(&self, x: &[f64]) -> Vec<AmbientVector> {
        (0..self.gen_count)
            .map(|i| {
                let mut out = vec![0.0; self.ambient_dim];
                self.generator_into(x, i, &mut out);
                out
            })
            .collect()
    }

    /// Divergence of the ambient extension of generator `i` with respect to
    /// the base density, evaluated at ambient `x`.
    pub fn generator_div_at(&self, x: &[f64], i: usize) -> f64 {
        match self.kind {
            ManifoldKind::Sphere { n } => -(n as f64) * x[i],
            _ => 0.0,
        }
    }

    pub fn generator_divergence(&self, p: &Point, i: usize) -> Result<f64, ManifoldError> {
        self.check_index(i)?;
        Ok(self.generator_div_at(&p.coords, i))
    }

    /// Adds `scale · ∇ div(X_i)` at `x` into `out`.
    pub fn generator_div_grad_add(&self, _x: &[f64], i: usize, scale: f64, out: &mut [f64]) {
        if let ManifoldKind::Sphere { n } = self.kind {
            out[i] -= scale * n as f64;
        }
    }

    /// Adds `scale · (∂X̄_i/∂x)ᵀ a` at ambient `x` into `out`.
    pub fn generator_vjp_add(&self, x: &[f64], i: usize, a: &[f64], scale: f64, out: &mut [f64]) {
        match self.kind {
            ManifoldKind::Euclidean { .. } => {}
            ManifoldKind::Sphere { .. } => {
                // X̄_i = e_i - x_i x  ⇒  Jᵀa = -<x,a> e_i - x_i a
                let xa = dot(x, a);
                let xi = x[i];
                for (o, ak) in out.iter_mut().zip(a) {
                    *o -= scale * xi * ak;
                }
                out[i] -= scale * xa;
            }
            ManifoldKind::SpecialOrthogonal { n } => {
                // X̄ = A v  ⇒  gradient a vᵀ
                for e in real_skew_entries(n, i) {
                    for r in 0..n {
                        out[r * n + e.row] += scale * a[r * n + e.col] * e.val.re;
                    }
                }
            }
            ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                // gradient a v† in complex form
                let special = matches!(self.kind, ManifoldKind::SpecialUnitary { .. });
                let nn = n * n;
                for e in complex_basis_entries(n, special, i).iter() {
                    for r in 0..n {
                        let (ar, ai) = (a[r * n + e.col], a[nn + r * n + e.col]);
                        out[r * n + e.row] += scale * (ar * e.val.re + ai * e.val.im);
                        out[nn + r * n + e.row] += scale * (ai * e.val.re - ar * e.val.im);
                    }
                }
            }
            ManifoldKind::Stiefel { m, n } => {
                // X̄ = V Q  ⇒  gradient Vᵀ a: row j += a[k], row k -= a[j]
                let (k, j) = skew_pair(n, i);
                for c in 0..m {
                    out[j * m + c] += scale * a[k * m + c];
                    out[k * m + c] -= scale * a[j * m + c];
                }
            }
            ManifoldKind::Spd { n, .. } => {
                // <a, S(Q)> = (B Q)_{jk} with B = Â + Âᵀ, Â the upper triangle of a.
                let (k, j) = (i / n, i % n);
                let b = |r: usize, s: usize| {
                    let (lo, hi) = (r.min(s), r.max(s));
                    let v = a[tri_index(n, lo, hi)];
                    if r == s {
                        2.0 * v
                    } else {
                        v
                    }
                };
                for p in 0..n {
                    for q in p..n {
                        let mut g = 0.0;
                        if k == q {
                            g += b(j, p);
                        }
                        if p != q && k == p {
                            g += b(j, q);
                        }
                        out[tri_index(n, p, q)] += scale * g;
                    }
                }
            }
        }
    }

    /// Residual of the tangency condition for ambient `v` at `p`.
    pub fn is_tangent(&self, p: &Point, v: &[f64]) -> f64 {
        self.tangent_residual(&p.coords, v)
    }

    pub fn tangent_residual(&self, x: &[f64], v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.ambient_dim);
        match self.kind {
            ManifoldKind::Sphere { .. } => dot(x, v).abs(),
            ManifoldKind::Euclidean { .. } => 0.0,
            ManifoldKind::SpecialOrthogonal { n } => {
                let (q, w) = (RealMatrix::from_vec(n, n, x.to_vec()), RealMatrix::from_vec(n, n, v.to_vec()));
                let s = q.transpose().matmul(&w);
                s.add(&s.transpose()).frobenius_norm()
            }
            ManifoldKind::Stiefel { m, n } => {
                let (q, w) = (RealMatrix::from_vec(n, m, x.to_vec()), RealMatrix::from_vec(n, m, v.to_vec()));
                let s = q.transpose().matmul(&w);
                s.add(&s.transpose()).frobenius_norm()
            }
            ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                let (q, w) = (ComplexMatrix::from_flat(n, n, x), ComplexMatrix::from_flat(n, n, v));
                let s = q.adjoint().matmul(&w);
                let mut r = s.add(&s.adjoint()).frobenius_norm();
                if matches!(self.kind, ManifoldKind::SpecialUnitary { .. }) {
                    // tangent vectors of SU(n) are Q·(traceless skew-Hermitian)
                    r += s.trace().norm();
                }
                r
            }
            ManifoldKind::Spd { .. } => 0.0,
        }
    }

    /// Projects a near-manifold ambient vector back onto the manifold.
    pub fn retract(&self, raw: &[f64]) -> Result<Point, ManifoldError> {
        self.check_len(raw)?;
        let mut coords = raw.to_vec();
        self.retract_in_place(&mut coords)?;
        Ok(Point { spec: *self, coords })
    }

    /// In-place retraction. Returns whether the coordinates changed.
    pub fn retract_in_place(&self, x: &mut [f64]) -> Result<bool, ManifoldError> {
        if let ManifoldKind::Spd { n, .. } = self.kind {
            let pivot = spd_matrix(n, x).min_cholesky_pivot();
            if !(pivot > 0.0) {
                return Err(ManifoldError::PositivityLost { pivot });
            }
            return Ok(false);
        }
        let residual = self.constraint_residual(x);
        if residual <= ON_MANIFOLD_TOL {
            return Ok(false);
        }
        // Normalization is the exact projection onto the sphere for any
        // nonzero vector; the QR retractions are only trusted near the manifold.
        let sphere = matches!(self.kind, ManifoldKind::Sphere { .. });
        let degenerate = sphere && !(norm(x) > 0.0 && residual.is_finite());
        if residual.is_nan() || degenerate || (!sphere && residual > RETRACT_TRUST_RADIUS) {
            return Err(ManifoldError::TooFar { residual });
        }
        let too_far = |_| ManifoldError::TooFar { residual };
        match self.kind {
            ManifoldKind::Sphere { .. } => {
                let r = norm(x);
                x.iter_mut().for_each(|v| *v /= r);
            }
            ManifoldKind::SpecialOrthogonal { n } => {
                let (q, _) = RealMatrix::from_vec(n, n, x.to_vec()).qr().map_err(too_far)?;
                let mut q = q.into_vec();
                if RealMatrix::from_vec(n, n, q.clone()).determinant() < 0.0 {
                    flip_last_column(n, n, &mut q);
                }
                x.copy_from_slice(&q);
            }
            ManifoldKind::Stiefel { m, n } => {
                let (q, _) = RealMatrix::from_vec(n, m, x.to_vec()).qr().map_err(too_far)?;
                x.copy_from_slice(q.as_slice());
            }
            ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                let (mut q, _) = ComplexMatrix::from_flat(n, n, x).qr().map_err(too_far)?;
                if matches!(self.kind, ManifoldKind::SpecialUnitary { .. }) {
                    let inv = q.determinant().inv();
                    for r in 0..n {
                        q.set(r, n - 1, q.get(r, n - 1) * inv);
                    }
                }
                x.copy_from_slice(&q.to_flat());
            }
            ManifoldKind::Spd { .. } | ManifoldKind::Euclidean { .. } => unreachable!(),
        }
        Ok(true)
    }

    /// Draws from the initial probability density: the normalized invariant
    /// measure on compact manifolds, a Wishart((5/β) I, β) on SPD.
    pub fn sample_base<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        let coords = match self.kind {
            ManifoldKind::Euclidean { n } => gaussian_vec(n, rng),
            ManifoldKind::Sphere { n } => loop {
                let g = gaussian_vec(n + 1, rng);
                let r = norm(&g);
                if r > 1e-12 {
                    break g.into_iter().map(|v| v / r).collect();
                }
            },
            ManifoldKind::SpecialOrthogonal { n } => {
                let mut q = haar_orthogonal_frame(n, n, rng);
                if RealMatrix::from_vec(n, n, q.clone()).determinant() < 0.0 {
                    flip_last_column(n, n, &mut q);
                }
                q
            }
            ManifoldKind::Stiefel { m, n } => haar_orthogonal_frame(n, m, rng),
            ManifoldKind::Unitary { n } => haar_unitary(n, rng).to_flat(),
            ManifoldKind::SpecialUnitary { n } => {
                let q = haar_unitary(n, rng);
                let root = q.determinant().powf(1.0 / n as f64);
                q.scale(root.inv()).to_flat()
            }
            ManifoldKind::Spd { n, beta } => {
                let w0 = RealMatrix::identity(n).scale(5.0 / beta);
                tri_from_matrix(&sample_wishart(&w0, beta, rng))
            }
        };
        Point { spec: *self, coords }
    }

    /// log ρ₀ of the initial density relative to the base density.
    pub fn base_log_density0(&self, p: &Point) -> f64 {
        self.base_log_density0_at(&p.coords)
    }

    pub fn base_log_density0_at(&self, x: &[f64]) -> f64 {
        match self.kind {
            ManifoldKind::Spd { n, beta } => {
                let w0 = RealMatrix::identity(n).scale(5.0 / beta);
                wishart_log_density(&spd_matrix(n, x), beta, &w0)
            }
            ManifoldKind::Euclidean { n } => {
                -0.5 * dot(x, x) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
            }
            _ => 0.0,
        }
    }

    /// Euclidean Gram matrix of the generators at `x`.
    pub fn generator_gram(&self, x: &[f64]) -> RealMatrix {
        let gens = self.generators(x);
        let m = self.gen_count;
        let mut g = RealMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                g[(i, j)] = dot(&gens[i], &gens[j]);
            }
        }
        g
    }

    /// Point coordinates as a real matrix (SO, Stiefel, SPD).
    pub fn real_matrix(&self, x: &[f64]) -> Option<RealMatrix> {
        match self.kind {
            ManifoldKind::SpecialOrthogonal { n } => Some(RealMatrix::from_vec(n, n, x.to_vec())),
            ManifoldKind::Stiefel { m, n } => Some(RealMatrix::from_vec(n, m, x.to_vec())),
            ManifoldKind::Spd { n, .. } => Some(spd_matrix(n, x)),
            _ => None,
        }
    }

    pub fn complex_matrix(&self, x: &[f64]) -> Option<ComplexMatrix> {
        match self.kind {
            ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                Some(ComplexMatrix::from_flat(n, n, x))
            }
            _ => None,
        }
    }

    /// Lie algebra element for generator `i` of SO/U/SU, as a complex matrix.
    pub fn lie_algebra_element(&self, i: usize) -> Option<ComplexMatrix> {
        let (n, entries) = match self.kind {
            ManifoldKind::SpecialOrthogonal { n } => (n, real_skew_entries(n, i).to_vec()),
            ManifoldKind::Unitary { n } => (n, complex_basis_entries(n, false, i).iter().copied().collect()),
            ManifoldKind::SpecialUnitary { n } => (n, complex_basis_entries(n, true, i).iter().copied().collect()),
            _ => return None,
        };
        let mut v = ComplexMatrix::zeros(n, n);
        for e in entries {
            v.set(e.row, e.col, v.get(e.row, e.col) + e.val);
        }
        Some(v)
    }
}

impl fmt::Display for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ManifoldKind::Sphere { n } => write!(f, "sphere:{n}"),
            ManifoldKind::SpecialOrthogonal { n } => write!(f, "so:{n}"),
            ManifoldKind::Unitary { n } => write!(f, "u:{n}"),
            ManifoldKind::SpecialUnitary { n } => write!(f, "su:{n}"),
            ManifoldKind::Stiefel { m, n } => write!(f, "stiefel:{m}:{n}"),
            ManifoldKind::Spd { n, beta } => write!(f, "spd:{n}:{beta}"),
            ManifoldKind::Euclidean { n } => write!(f, "euclidean:{n}"),
        }
    }
}

impl FromStr for ManifoldSpec {
    type Err = ManifoldError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, None)
    }
}

/// A point on a manifold, stored by its ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub spec: ManifoldSpec,
    pub coords: Vec<f64>,
}

impl Point {
    /// Wraps coordinates without projecting; fails if the length is wrong or
    /// the constraint residual exceeds `tol`.
    pub fn new(spec: ManifoldSpec, coords: Vec<f64>, tol: f64) -> Result<Self, ManifoldError> {
        spec.check_len(&coords)?;
        let residual = spec.constraint_residual(&coords);
        if !(residual <= tol) {
            return Err(match spec.kind {
                ManifoldKind::Spd { .. } => ManifoldError::PositivityLost { pivot: 0.0 },
                _ => ManifoldError::TooFar { residual },
            });
        }
        Ok(Self { spec, coords })
    }

    /// The identity (or first-frame / north-pole) point.
    pub fn origin(spec: ManifoldSpec) -> Self {
        let mut coords = vec![0.0; spec.ambient_dim];
        match spec.kind {
            ManifoldKind::Euclidean { .. } => {}
            ManifoldKind::Sphere { .. } => coords[0] = 1.0,
            ManifoldKind::SpecialOrthogonal { n } | ManifoldKind::Unitary { n } | ManifoldKind::SpecialUnitary { n } => {
                for i in 0..n {
                    coords[i * n + i] = 1.0;
                }
            }
            ManifoldKind::Stiefel { m, .. } => {
                for i in 0..m {
                    coords[i * m + i] = 1.0;
                }
            }
            ManifoldKind::Spd { n, .. } => {
                for i in 0..n {
                    coords[tri_index(n, i, i)] = 1.0;
                }
            }
        }
        Self { spec, coords }
    }
}

#[derive(Debug, Clone, Copy)]
struct BasisEntry {
    row: usize,
    col: usize,
    val: Complex64,
}

/// Up to two nonzero entries of a Lie algebra basis element.
struct SparseBasis {
    entries: [BasisEntry; 2],
    len: usize,
}

impl SparseBasis {
    fn iter(&self) -> impl Iterator<Item = &BasisEntry> {
        self.entries[..self.len].iter()
    }
}

fn entry(row: usize, col: usize, re: f64, im: f64) -> BasisEntry {
    BasisEntry {
        row,
        col,
        val: Complex64::new(re, im),
    }
}

/// Pairs (k, j), k < j, ordered as in the so(3) basis
/// v₁ = E₂₃ − E₃₂, v₂ = E₁₃ − E₃₁, v₃ = E₁₂ − E₂₁ (reverse lexicographic).
fn skew_pair(n: usize, i: usize) -> (usize, usize) {
    let count = n * (n - 1) / 2;
    let mut lex = count - 1 - i;
    for k in 0..n {
        let row = n - 1 - k;
        if lex < row {
            return (k, k + 1 + lex);
        }
        lex -= row;
    }
    unreachable!("skew pair index out of range")
}

fn real_skew_entries(n: usize, i: usize) -> [BasisEntry; 2] {
    let (k, j) = skew_pair(n, i);
    [entry(k, j, 1.0, 0.0), entry(j, k, -1.0, 0.0)]
}

/// Basis of u(n) (or su(n) when `special`).
///
/// n ≥ 3: real skew E_kj − E_jk, then i(E_kj + E_jk), then the diagonal part
/// (iE_jj for u(n); iE_kk − iE_{k+1,k+1} for su(n)).
/// n = 2 uses the Pauli ordering: i(E₁₂ + E₂₁), E₁₂ − E₂₁, then the diagonal,
/// with diag(−i, i) for su(2).
fn complex_basis_entries(n: usize, special: bool, i: usize) -> SparseBasis {
    let pairs = n * (n - 1) / 2;
    let zero = entry(0, 0, 0.0, 0.0);
    let two = |a, b| SparseBasis { entries: [a, b], len: 2 };
    let one = |a| SparseBasis { entries: [a, zero], len: 1 };
    let skew = |p: usize| {
        let (k, j) = skew_pair(n, p);
        two(entry(k, j, 1.0, 0.0), entry(j, k, -1.0, 0.0))
    };
    let sym = |p: usize| {
        let (k, j) = skew_pair(n, p);
        two(entry(k, j, 0.0, 1.0), entry(j, k, 0.0, 1.0))
    };
    let (first, second): (&dyn Fn(usize) -> SparseBasis, &dyn Fn(usize) -> SparseBasis) =
        if n == 2 { (&sym, &skew) } else { (&skew, &sym) };
    if i < pairs {
        return first(i);
    }
    if i < 2 * pairs {
        return second(i - pairs);
    }
    let d = i - 2 * pairs;
    if !special {
        return one(entry(d, d, 0.0, 1.0));
    }
    if n == 2 {
        two(entry(0, 0, 0.0, -1.0), entry(1, 1, 0.0, 1.0))
    } else {
        two(entry(d, d, 0.0, 1.0), entry(d + 1, d + 1, 0.0, -1.0))
    }
}

/// Row-major offset of (r, s), r ≤ s, in the packed upper triangle.
pub fn tri_index(n: usize, r: usize, s: usize) -> usize {
    debug_assert!(r <= s && s < n);
    r * n - r * (r + 1) / 2 + s
}

/// Symmetric matrix from packed upper-triangle coordinates.
pub fn spd_matrix(n: usize, tri: &[f64]) -> RealMatrix {
    let mut q = RealMatrix::zeros(n, n);
    for r in 0..n {
        for s in r..n {
            let v = tri[tri_index(n, r, s)];
            q[(r, s)] = v;
            q[(s, r)] = v;
        }
    }
    q
}

pub fn tri_from_matrix(q: &RealMatrix) -> Vec<f64> {
    let n = q.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for r in 0..n {
        for s in r..n {
            out.push(q[(r, s)]);
        }
    }
    out
}

/// log Γ_n(a), the multivariate gamma function.
pub fn ln_multigamma(n: usize, a: f64) -> f64 {
    let nf = n as f64;
    nf * (nf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=n).map(|j| libm::lgamma(a + (1.0 - j as f64) / 2.0)).sum::<f64>()
}

/// Normalized Wishart(W, β) log-density with respect to the congruence
/// invariant density det(Q)^{-(n+1)/2} dQ.
pub fn wishart_log_density(q: &RealMatrix, beta: f64, w: &RealMatrix) -> f64 {
    let n = q.rows();
    let winv_q = match w.solve(q) {
        Ok(m) => m,
        Err(_) => return f64::NEG_INFINITY,
    };
    let (det_q, det_w) = (q.determinant(), w.determinant());
    if !(det_q > 0.0) {
        return f64::NEG_INFINITY;
    }
    let log_norm = beta * n as f64 / 2.0 * std::f64::consts::LN_2 + ln_multigamma(n, beta / 2.0);
    beta / 2.0 * (det_q.ln() - det_w.ln()) - 0.5 * winv_q.trace() - log_norm
}

/// Bartlett decomposition: Q = L A Aᵀ Lᵀ with L = chol(W), A lower
/// triangular, A_ii² ~ χ²(β − i), A_ij ~ N(0, 1) below the diagonal.
pub fn sample_wishart<R: Rng + ?Sized>(w: &RealMatrix, beta: f64, rng: &mut R) -> RealMatrix {
    let n = w.rows();
    let l = w.cholesky().expect("Wishart scale must be positive definite");
    let mut a = RealMatrix::zeros(n, n);
    for i in 0..n {
        let chi = ChiSquared::new(beta - i as f64).expect("beta >= n + 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l.matmul(&a);
    let q = la.matmul(&la.transpose());
    // exact symmetry
    q.add(&q.transpose()).scale(0.5)
}

fn gaussian_vec<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Q factor (positive R diagonal) of a rows×cols Gaussian matrix.
fn haar_orthogonal_frame<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let g = RealMatrix::from_vec(rows, cols, gaussian_vec(rows * cols, rng));
        if let Ok((q, _)) = g.qr() {
            return q.into_vec();
        }
    }
}

fn haar_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ComplexMatrix {
    loop {
        let g = ComplexMatrix::new(
            RealMatrix::from_vec(n, n, gaussian_vec(n * n, rng)),
            RealMatrix::from_vec(n, n, gaussian_vec(n * n, rng)),
        );
        if let Ok((q, _)) = g.qr() {
            return q;
        }
    }
}

fn flip_last_column(rows: usize, cols: usize, q: &mut [f64]) {
    for r in 0..rows {
        q[r * cols + cols - 1] = -q[r * cols + cols - 1];
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
