//! Unnormalized mixture target densities, their ambient gradients, and
//! mixture centers.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use thiserror::Error;

use crate::densemat::{ComplexMatrix, RealMatrix};
use crate::manifolds::{spd_matrix, tri_from_matrix, tri_index, ManifoldKind, ManifoldSpec, Point};

/// Coefficient sets for the conjugation-invariant density on SU(3).
pub const CONJUGATION_COEFFS: [[f64; 3]; 2] = [[0.17, -0.65, 1.22], [0.98, -0.63, -0.21]];

/// Unscaled SPD(2) centers; the mixture uses each divided by β.
pub const SPD2_CENTERS: [[[f64; 2]; 2]; 4] = [
    [[1.0, 0.0], [0.0, 2.0]],
    [[2.0, 0.0], [0.0, 1.0]],
    [[1.0, 1.0], [1.0, 2.0]],
    [[2.0, -1.0], [-1.0, 1.0]],
];

/// Unscaled SPD(3) centers (diagonal).
pub const SPD3_CENTERS: [[f64; 3]; 4] = [[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0], [2.0, 2.0, 2.0]];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("target family {family} is not defined on {manifold}")]
    Unsupported { family: TargetFamily, manifold: String },
    #[error("point lives on {got}, target is defined on {expected}")]
    ManifoldMismatch { expected: String, got: String },
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("a mixture needs at least one component")]
    Empty,
    #[error("center {index} is not a valid point ({reason})")]
    BadCenter { index: usize, reason: String },
    #[error("unknown target family {0:?}")]
    UnknownFamily(String),
    #[error("no fixed centers for {manifold} with k = {k}")]
    NoFixedCenters { manifold: String, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetFamily {
    VonMisesFisher,
    Langevin,
    UnitaryTrace,
    Wishart,
    ConjugationInvariant,
    /// The flow's own initial density; makes the untrained flow exact.
    Base,
}

impl TargetFamily {
    pub fn supports(self, spec: &ManifoldSpec) -> bool {
        use ManifoldKind::*;
        match self {
            TargetFamily::VonMisesFisher => matches!(spec.kind, Sphere { .. }),
            TargetFamily::Langevin => matches!(spec.kind, SpecialOrthogonal { .. } | Stiefel { .. }),
            TargetFamily::UnitaryTrace | TargetFamily::ConjugationInvariant => {
                matches!(spec.kind, Unitary { .. } | SpecialUnitary { .. })
            }
            TargetFamily::Wishart => matches!(spec.kind, Spd { .. }),
            TargetFamily::Base => true,
        }
    }

    /// The family the experiments pair with each manifold.
    pub fn default_for(spec: &ManifoldSpec) -> Self {
        use ManifoldKind::*;
        match spec.kind {
            Sphere { .. } => TargetFamily::VonMisesFisher,
            SpecialOrthogonal { .. } | Stiefel { .. } => TargetFamily::Langevin,
            Unitary { .. } | SpecialUnitary { .. } => TargetFamily::UnitaryTrace,
            Spd { .. } => TargetFamily::Wishart,
            Euclidean { .. } => TargetFamily::Base,
        }
    }
}

impl fmt::Display for TargetFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetFamily::VonMisesFisher => "vmf",
            TargetFamily::Langevin => "langevin",
            TargetFamily::UnitaryTrace => "unitary_trace",
            TargetFamily::Wishart => "wishart",
            TargetFamily::ConjugationInvariant => "conjugation_invariant",
            TargetFamily::Base => "base",
        })
    }
}

impl FromStr for TargetFamily {
    type Err = TargetError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "vmf" | "von_mises_fisher" => TargetFamily::VonMisesFisher,
            "langevin" => TargetFamily::Langevin,
            "unitary_trace" | "unitarytrace" => TargetFamily::UnitaryTrace,
            "wishart" => TargetFamily::Wishart,
            "conjugation_invariant" | "conjugationinvariant" => TargetFamily::ConjugationInvariant,
            "base" => TargetFamily::Base,
            _ => return Err(TargetError::UnknownFamily(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Component {
    Center(Vec<f64>),
    Wishart { w_inv: RealMatrix, log_det_w: f64 },
    Coeffs(Vec<f64>),
    Base,
}

/// A mixture target `log ρ*(q) = logsumexp_i log ρ(q | β, W_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    manifold: ManifoldSpec,
    family: TargetFamily,
    beta: f64,
    centers: Vec<Point>,
    coeffs: Vec<Vec<f64>>,
    components: Vec<Component>,
}

impl TargetSpec {
    /// Mixture over centers for vMF, Langevin, UnitaryTrace or Wishart.
    pub fn new(manifold: ManifoldSpec, family: TargetFamily, beta: f64, centers: Vec<Point>) -> Result<Self, TargetError> {
        Self::check_family(&manifold, family, beta)?;
        if family == TargetFamily::ConjugationInvariant || family == TargetFamily::Base {
            return Err(TargetError::Unsupported {
                family,
                manifold: format!("{manifold} (takes no centers)"),
            });
        }
        if centers.is_empty() {
            return Err(TargetError::Empty);
        }
        let mut components = Vec::with_capacity(centers.len());
        for (index, c) in centers.iter().enumerate() {
            let bad = |reason: String| TargetError::BadCenter { index, reason };
            if c.spec != manifold {
                return Err(bad(format!("lives on {}", c.spec)));
            }
            let residual = manifold.constraint_residual(&c.coords);
            if !(residual <= 1e-8) {
                return Err(bad(format!("constraint residual {residual:e}")));
            }
            components.push(match manifold.kind {
                ManifoldKind::Spd { n, .. } => {
                    let w = spd_matrix(n, &c.coords);
                    let w_inv = w.inverse().map_err(|e| bad(e.to_string()))?;
                    Component::Wishart {
                        w_inv,
                        log_det_w: w.determinant().ln(),
                    }
                }
                _ => Component::Center(c.coords.clone()),
            });
        }
        Ok(Self {
            manifold,
            family,
            beta,
            centers,
            coeffs: Vec::new(),
            components,
        })
    }

    /// `(β/n) Re tr(Σ_j c_j U^j)`, one mixture component per coefficient
    /// vector.
    pub fn conjugation_invariant(manifold: ManifoldSpec, beta: f64, coeffs: Vec<Vec<f64>>) -> Result<Self, TargetError> {
        Self::check_family(&manifold, TargetFamily::ConjugationInvariant, beta)?;
        if coeffs.is_empty() || coeffs.iter().any(Vec::is_empty) {
            return Err(TargetError::Empty);
        }
        let components = coeffs.iter().cloned().map(Component::Coeffs).collect();
        Ok(Self {
            manifold,
            family: TargetFamily::ConjugationInvariant,
            beta,
            centers: Vec::new(),
            coeffs,
            components,
        })
    }

    /// The initial density of the flow itself.
    pub fn base(manifold: ManifoldSpec) -> Self {
        Self {
            manifold,
            family: TargetFamily::Base,
            beta: 1.0,
            centers: Vec::new(),
            coeffs: Vec::new(),
            components: vec![Component::Base],
        }
    }

    fn check_family(manifold: &ManifoldSpec, family: TargetFamily, beta: f64) -> Result<(), TargetError> {
        if !family.supports(manifold) {
            return Err(TargetError::Unsupported {
                family,
                manifold: manifold.to_string(),
            });
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(TargetError::Beta(beta));
        }
        Ok(())
    }

    pub fn manifold(&self) -> &ManifoldSpec {
        &self.manifold
    }

    pub fn family(&self) -> TargetFamily {
        self.family
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn centers(&self) -> &[Point] {
        &self.centers
    }

    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    fn check(&self, q: &Point) -> Result<(), TargetError> {
        if q.spec != self.manifold {
            return Err(TargetError::ManifoldMismatch {
                expected: self.manifold.to_string(),
                got: q.spec.to_string(),
            });
        }
        Ok(())
    }

    pub fn log_target(&self, q: &Point) -> Result<f64, TargetError> {
        self.check(q)?;
        Ok(self.log_target_at(&q.coords))
    }

    pub fn grad_log_target(&self, q: &Point) -> Result<Vec<f64>, TargetError> {
        self.check(q)?;
        Ok(self.value_and_grad_at(&q.coords).1)
    }

    pub fn log_target_at(&self, x: &[f64]) -> f64 {
        let logs: Vec<f64> = self.components.iter().map(|c| self.component_log(c, x)).collect();
        logsumexp(&logs)
    }

    /// Log density and its ambient gradient.
    pub fn value_and_grad_at(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let logs: Vec<f64> = self.components.iter().map(|c| self.component_log(c, x)).collect();
        let lse = logsumexp(&logs);
        let mut grad = vec![0.0; x.len()];
        for (c, l) in self.components.iter().zip(&logs) {
            let w = (l - lse).exp();
            if w == 0.0 {
                continue;
            }
            for (g, cg) in grad.iter_mut().zip(self.component_grad(c, x)) {
                *g += w * cg;
            }
        }
        (lse, grad)
    }

    /// `m` in the Langevin exponent `(β/m) tr(WᵀQ)`.
    fn langevin_m(&self) -> f64 {
        match self.manifold.kind {
            ManifoldKind::SpecialOrthogonal { n } => (n - 1) as f64,
            ManifoldKind::Stiefel { m, .. } => m as f64,
            _ => 1.0,
        }
    }

    fn linear_scale(&self) -> f64 {
        match self.family {
            TargetFamily::VonMisesFisher => self.beta,
            TargetFamily::Langevin => self.beta / self.langevin_m(),
            TargetFamily::UnitaryTrace => self.beta / self.manifold.n() as f64,
            _ => unreachable!("not a linear family"),
        }
    }

    fn component_log(&self, c: &Component, x: &[f64]) -> f64 {
        match c {
            // vMF, Langevin and UnitaryTrace are all β'·⟨W, Q⟩ in ambient
            // coordinates (Re tr(W†Q) is the real inner product of the flats).
            Component::Center(w) => self.linear_scale() * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>(),
            Component::Wishart { w_inv, log_det_w } => {
                let n = self.manifold.n();
                let q = spd_matrix(n, x);
                let det = q.determinant();
                if !(det > 0.0) {
                    return f64::NEG_INFINITY;
                }
                0.5 * self.beta * (det.ln() - log_det_w) - 0.5 * w_inv.matmul(&q).trace()
            }
            Component::Coeffs(c) => {
                let n = self.manifold.n();
                let u = ComplexMatrix::from_flat(n, n, x);
                let mut power = u.clone();
                let mut total = 0.0;
                for (j, cj) in c.iter().enumerate() {
                    if j > 0 {
                        power = power.matmul(&u);
                    }
                    total += cj * power.trace().re;
                }
                self.beta / n as f64 * total
            }
            Component::Base => self.manifold.base_log_density0_at(x),
        }
    }

    fn component_grad(&self, c: &Component, x: &[f64]) -> Vec<f64> {
        match c {
            Component::Center(w) => {
                let s = self.linear_scale();
                w.iter().map(|v| s * v).collect()
            }
            Component::Wishart { w_inv, .. } => self.wishart_grad(x, w_inv, self.beta),
            Component::Coeffs(c) => {
                // d Re tr(Σ c_j U^j) = Re tr(M dU) with M = Σ j c_j U^{j-1}
                let n = self.manifold.n();
                let u = ComplexMatrix::from_flat(n, n, x);
                let mut m = ComplexMatrix::identity(n).scale(Complex64::new(c[0], 0.0));
                let mut power = ComplexMatrix::identity(n);
                for (j, cj) in c.iter().enumerate().skip(1) {
                    power = power.matmul(&u);
                    m = m.add(&power.scale(Complex64::new((j + 1) as f64 * cj, 0.0)));
                }
                let s = self.beta / n as f64;
                let nn = n * n;
                let mut g = vec![0.0; 2 * nn];
                for a in 0..n {
                    for b in 0..n {
                        let z = m.get(b, a);
                        g[a * n + b] = s * z.re;
                        g[nn + a * n + b] = -s * z.im;
                    }
                }
                g
            }
            Component::Base => match self.manifold.kind {
                ManifoldKind::Spd { n, beta } => {
                    let w_inv = RealMatrix::identity(n).scale(beta / 5.0);
                    self.wishart_grad(x, &w_inv, beta)
                }
                ManifoldKind::Euclidean { .. } => x.iter().map(|v| -v).collect(),
                _ => vec![0.0; x.len()],
            },
        }
    }

    /// Gradient of `(β/2) log det Q − ½ tr(W⁻¹Q)` in upper-triangle
    /// coordinates; off-diagonal coordinates stand for two matrix entries.
    fn wishart_grad(&self, x: &[f64], w_inv: &RealMatrix, beta: f64) -> Vec<f64> {
        let n = self.manifold.n();
        let q = spd_matrix(n, x);
        let Ok(q_inv) = q.inverse() else {
            return vec![f64::NAN; x.len()];
        };
        let g = q_inv.scale(0.5 * beta).sub(&w_inv.scale(0.5));
        let mut out = vec![0.0; x.len()];
        for r in 0..n {
            for s in r..n {
                let factor = if r == s { 1.0 } else { 2.0 };
                out[tri_index(n, r, s)] = factor * g[(r, s)];
            }
        }
        out
    }
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mixture centers: `k` base-measure samples on the compact manifolds, the
/// fixed matrices divided by β on SPD(2) and SPD(3).
pub fn sample_centers<R: Rng + ?Sized>(spec: &ManifoldSpec, k: usize, rng: &mut R) -> Result<Vec<Point>, TargetError> {
    match spec.kind {
        ManifoldKind::Spd { n, beta } => {
            let fixed: Vec<RealMatrix> = match n {
                2 => SPD2_CENTERS.iter().map(|m| RealMatrix::from_rows(&[&m[0], &m[1]])).collect(),
                3 => SPD3_CENTERS.iter().map(|d| RealMatrix::diag(d)).collect(),
                _ => Vec::new(),
            };
            if k == 0 || k > fixed.len() {
                return Err(TargetError::NoFixedCenters {
                    manifold: spec.to_string(),
                    k,
                });
            }
            Ok(fixed
                .into_iter()
                .take(k)
                .map(|w| Point {
                    spec: *spec,
                    coords: tri_from_matrix(&w.scale(1.0 / beta)),
                })
                .collect())
        }
        _ => Ok((0..k).map(|_| spec.sample_base(rng)).collect()),
    }
}
