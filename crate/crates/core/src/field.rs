//! Time-dependent vector fields `X_t = Σ_i f_i(t, ·) X_i` built from a
//! manifold's generating set and the coefficient network, with exact and
//! stochastic divergence and the contractions used by the adjoint pass.

use rand::Rng;
use thiserror::Error;

use crate::manifolds::{ManifoldError, ManifoldSpec, Point};
use crate::net::{ForwardPass, MlpParams, ParamGrad};

/// Points handed to the checked entry points must satisfy their constraint
/// to within this residual.
pub const VELOCITY_CONSTRAINT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("network maps {got_in} → {got_out} but the manifold needs {want_in} → {want_out}")]
    Architecture {
        want_in: usize,
        want_out: usize,
        got_in: usize,
        got_out: usize,
    },
    #[error("point violates its constraint (residual {residual:e})")]
    ConstraintViolation { residual: f64 },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

/// How the divergence channel is evaluated along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum DivergenceMode {
    Exact,
    /// Hutchinson estimate averaged over the given Rademacher probes.
    Probes(Vec<Vec<f64>>),
}

impl DivergenceMode {
    pub fn rademacher<R: Rng + ?Sized>(gen_count: usize, n_probes: usize, rng: &mut R) -> Self {
        DivergenceMode::Probes((0..n_probes).map(|_| rademacher(gen_count, rng)).collect())
    }
}

pub fn rademacher<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Result of [`FlowField::adjoint_contractions`].
#[derive(Debug, Clone)]
pub struct Contractions {
    pub dx_dot: Vec<f64>,
    pub da_x: Vec<f64>,
    pub g_params: ParamGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    spec: ManifoldSpec,
    params: MlpParams,
}

/// Network output, generators and their divergences at one (t, x).
struct Local {
    pass: ForwardPass,
    gens: Vec<Vec<f64>>,
    divs: Vec<f64>,
}

impl FlowField {
    pub fn new(spec: ManifoldSpec, params: MlpParams) -> Result<Self, FieldError> {
        let (want_in, want_out) = (spec.ambient_dim + 1, spec.gen_count);
        let (got_in, got_out) = (params.input_dim(), params.output_dim());
        if (want_in, want_out) != (got_in, got_out) {
            return Err(FieldError::Architecture {
                want_in,
                want_out,
                got_in,
                got_out,
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    pub fn into_params(self) -> MlpParams {
        self.params
    }

    fn check(&self, x: &Point) -> Result<(), FieldError> {
        if x.spec != self.spec {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.spec.ambient_dim,
                got: x.spec.ambient_dim,
            }
            .into());
        }
        let residual = self.spec.constraint_residual(&x.coords);
        if !(residual <= VELOCITY_CONSTRAINT_TOL) {
            return Err(FieldError::ConstraintViolation { residual });
        }
        Ok(())
    }

    fn local(&self, t: f64, x: &[f64]) -> Local {
        let pass = self.params.forward_pass(t, x);
        let gens = self.spec.generators(x);
        let divs = (0..self.spec.gen_count).map(|i| self.spec.generator_div_at(x, i)).collect();
        Local { pass, gens, divs }
    }

    fn combine(&self, f: &[f64], gens: &[Vec<f64>]) -> Vec<f64> {
        let mut v = vec![0.0; self.spec.ambient_dim];
        for (fi, g) in f.iter().zip(gens) {
            for (vk, gk) in v.iter_mut().zip(g) {
                *vk += fi * gk;
            }
        }
        v
    }

    pub fn velocity(&self, t: f64, x: &Point) -> Result<Vec<f64>, FieldError> {
        self.check(x)?;
        Ok(self.velocity_at(t, &x.coords))
    }

    /// Velocity of the ambient extension at any ambient `x`, unchecked.
    pub fn velocity_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let f = self.params.forward(t, x);
        self.combine(&f, &self.spec.generators(x))
    }

    fn divergence_local(&self, loc: &Local, mode: &DivergenceMode) -> f64 {
        let f = loc.pass.output();
        let generator_term: f64 = f.iter().zip(&loc.divs).map(|(a, b)| a * b).sum();
        let coefficient_term = match mode {
            DivergenceMode::Exact => (0..self.spec.gen_count)
                .map(|i| self.params.jvp_cached(&loc.pass, &loc.gens[i])[i])
                .sum::<f64>(),
            DivergenceMode::Probes(probes) => {
                let total: f64 = probes
                    .iter()
                    .map(|eps| {
                        let dir = self.combine(eps, &loc.gens);
                        let jv = self.params.jvp_cached(&loc.pass, &dir);
                        eps.iter().zip(&jv).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .sum();
                total / probes.len() as f64
            }
        };
        coefficient_term + generator_term
    }

    pub fn divergence_exact(&self, t: f64, x: &Point) -> Result<f64, FieldError> {
        self.check(x)?;
        Ok(self.divergence_at(t, &x.coords, &DivergenceMode::Exact))
    }

    /// Hutchinson estimate with `n_probes` fresh Rademacher probes.
    pub fn divergence_estimate<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: &Point,
        rng: &mut R,
        n_probes: usize,
    ) -> Result<f64, FieldError> {
        assert!(n_probes >= 1, "at least one probe");
        self.check(x)?;
        let mode = DivergenceMode::rademacher(self.spec.gen_count, n_probes, rng);
        Ok(self.divergence_at(t, &x.coords, &mode))
    }

    pub fn divergence_at(&self, t: f64, x: &[f64], mode: &DivergenceMode) -> f64 {
        self.divergence_local(&self.local(t, x), mode)
    }

    /// Velocity and divergence from a single forward pass.
    pub fn velocity_and_divergence_at(&self, t: f64, x: &[f64], mode: &DivergenceMode) -> (Vec<f64>, f64) {
        let loc = self.local(t, x);
        let v = self.combine(loc.pass.output(), &loc.gens);
        let div = self.divergence_local(&loc, mode);
        (v, div)
    }

    /// With `Y = Σ f_i X̄_i` and `g` the exact divergence, returns
    /// `Y(t, x)`, `(∂Y/∂x)ᵀ a_x + a_ℓ ∂g/∂x` and `(∂Y/∂λ)ᵀ a_x + a_ℓ ∂g/∂λ`.
    pub fn adjoint_contractions(&self, t: f64, x: &[f64], a_x: &[f64], a_l: f64) -> Contractions {
        let mut g = ParamGrad::zeros_like(&self.params);
        let (dx_dot, da_x) = self.adjoint_contractions_into(t, x, a_x, a_l, &mut g.0, 1.0);
        Contractions { dx_dot, da_x, g_params: g }
    }

    /// As [`adjoint_contractions`](Self::adjoint_contractions), adding
    /// `scale ·` the parameter contraction into `g_params`.
    pub fn adjoint_contractions_into(
        &self,
        t: f64,
        x: &[f64],
        a_x: &[f64],
        a_l: f64,
        g_params: &mut [f64],
        scale: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let (d, m) = (self.spec.ambient_dim, self.spec.gen_count);
        assert_eq!(x.len(), d);
        assert_eq!(a_x.len(), d);
        let loc = self.local(t, x);
        let f = loc.pass.output().to_vec();
        let dx_dot = self.combine(&f, &loc.gens);

        // cotangent on the network output: ⟨X̄_i, a_x⟩ + a_ℓ div X̄_i
        let u: Vec<f64> = (0..m)
            .map(|i| {
                let proj: f64 = loc.gens[i].iter().zip(a_x).map(|(a, b)| a * b).sum();
                proj + a_l * loc.divs[i]
            })
            .collect();
        let mut da_x = self.params.vjp_cached(&loc.pass, &u, Some((&mut *g_params, scale)));
        da_x.remove(0);

        for i in 0..m {
            self.spec.generator_vjp_add(x, i, a_x, f[i], &mut da_x);
        }

        if a_l != 0.0 {
            let mut e = vec![0.0; m];
            for i in 0..m {
                e[i] = 1.0;
                let gx = self.params.grad_of_jvp_cached(&loc.pass, &loc.gens[i], &e, Some((&mut *g_params, scale * a_l)));
                for (o, v) in da_x.iter_mut().zip(&gx) {
                    *o += a_l * v;
                }
                // ∇f_i transported through the generator Jacobian
                let mut grad_fi = self.params.vjp_cached(&loc.pass, &e, None);
                grad_fi.remove(0);
                self.spec.generator_vjp_add(x, i, &grad_fi, a_l, &mut da_x);
                self.spec.generator_div_grad_add(x, i, a_l * f[i], &mut da_x);
                e[i] = 0.0;
            }
        }
        (dx_dot, da_x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{architecture_for, Activation, LayerShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Network whose output is the constant `c`.
    fn constant_field(spec: ManifoldSpec, c: &[f64]) -> FlowField {
        let mut p = MlpParams::zeros(architecture_for(&spec));
        let last = p.layers().len() - 1;
        p.layer_mut(last).1.copy_from_slice(c);
        FlowField::new(spec, p).unwrap()
    }

    fn random_field(spec: ManifoldSpec, scale: f64, rng: &mut impl Rng) -> FlowField {
        let mut p = MlpParams::zeros(architecture_for(&spec));
        for v in p.values_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
        FlowField::new(spec, p).unwrap()
    }

    fn specs() -> Vec<ManifoldSpec> {
        vec![
            ManifoldSpec::sphere(2),
            ManifoldSpec::so(3),
            ManifoldSpec::u(2),
            ManifoldSpec::su(2),
            ManifoldSpec::stiefel(2, 3),
            ManifoldSpec::spd(2, 20.0),
        ]
    }

    #[test]
    fn architecture_is_checked() {
        let p = MlpParams::zeros(architecture_for(&ManifoldSpec::so(3)));
        assert!(matches!(
            FlowField::new(ManifoldSpec::sphere(2), p),
            Err(FieldError::Architecture { .. })
        ));
    }

    #[test]
    fn velocity_examples() {
        let s2 = ManifoldSpec::sphere(2);
        let zero = FlowField::new(s2, MlpParams::zeros(architecture_for(&s2))).unwrap();
        let e1 = Point::origin(s2);
        assert_eq!(zero.velocity(0.5, &e1).unwrap(), vec![0.0; 3]);

        let ff = constant_field(s2, &[0.0, 1.0, 0.0]);
        assert_eq!(ff.velocity(0.0, &e1).unwrap(), vec![0.0, 1.0, 0.0]);

        let off = Point { spec: s2, coords: vec![1.1, 0.0, 0.0] };
        assert!(matches!(ff.velocity(0.0, &off), Err(FieldError::ConstraintViolation { .. })));
    }

    #[test]
    fn velocity_is_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for spec in specs() {
            let ff = random_field(spec, 0.5, &mut rng);
            for _ in 0..100 {
                let x = spec.sample_base(&mut rng);
                let v = ff.velocity(rng.random_range(0.0..1.0), &x).unwrap();
                assert!(spec.is_tangent(&x, &v) <= 1e-8, "{spec}");
            }
        }
    }

    #[test]
    fn final_layer_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = ManifoldSpec::so(3);
        let ff = random_field(spec, 0.5, &mut rng);
        let mut doubled = ff.clone();
        let last = doubled.params().layers().len() - 1;
        let (w, b) = doubled.params_mut().layer_mut(last);
        w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= 2.0);
        let x = spec.sample_base(&mut rng);
        let (v1, v2) = (ff.velocity(0.3, &x).unwrap(), doubled.velocity(0.3, &x).unwrap());
        for (a, b) in v1.iter().zip(&v2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_divergence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let s2 = ManifoldSpec::sphere(2);
        let zero = FlowField::new(s2, MlpParams::zeros(architecture_for(&s2))).unwrap();
        let x = s2.sample_base(&mut rng);
        assert_eq!(zero.divergence_exact(0.1, &x).unwrap(), 0.0);

        let so3 = ManifoldSpec::so(3);
        let ff = constant_field(so3, &[0.3, -1.2, 0.7]);
        assert_eq!(ff.divergence_exact(0.4, &so3.sample_base(&mut rng)).unwrap(), 0.0);

        let c = [0.4, -0.9, 1.3];
        let ff = constant_field(s2, &c);
        for _ in 0..10 {
            let x = s2.sample_base(&mut rng);
            let expected: f64 = (0..3).map(|i| c[i] * (-2.0 * x.coords[i])).sum();
            assert!((ff.divergence_exact(0.2, &x).unwrap() - expected).abs() < 1e-14);
        }
    }

    /// On flat space the divergence is the trace of the velocity Jacobian.
    #[test]
    fn exact_divergence_matches_dense_oracle_on_flat_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let spec = ManifoldSpec::new(crate::manifolds::ManifoldKind::Euclidean { n: 4 }).unwrap();
        let ff = random_field(spec, 0.6, &mut rng);
        let h = 1e-5;
        for _ in 0..10 {
            let x = spec.sample_base(&mut rng).coords;
            let t = rng.random_range(0.0..1.0);
            let mut trace = 0.0;
            for k in 0..4 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                trace += (ff.velocity_at(t, &xp)[k] - ff.velocity_at(t, &xm)[k]) / (2.0 * h);
            }
            let div = ff.divergence_at(t, &x, &DivergenceMode::Exact);
            assert!((div - trace).abs() < 1e-8, "{div} vs {trace}");
        }
    }

    #[test]
    fn estimator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let s2 = ManifoldSpec::sphere(2);
        let zero = FlowField::new(s2, MlpParams::zeros(architecture_for(&s2))).unwrap();
        let x = s2.sample_base(&mut rng);
        assert_eq!(zero.divergence_estimate(0.5, &x, &mut rng, 3).unwrap(), 0.0);

        let so2 = ManifoldSpec::so(2);
        let ff = random_field(so2, 0.8, &mut rng);
        for _ in 0..20 {
            let x = so2.sample_base(&mut rng);
            let exact = ff.divergence_exact(0.3, &x).unwrap();
            let est = ff.divergence_estimate(0.3, &x, &mut rng, 1).unwrap();
            assert!((exact - est).abs() < 1e-14);
        }
    }

    #[test]
    fn estimator_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for spec in [ManifoldSpec::sphere(2), ManifoldSpec::so(3)] {
            let ff = random_field(spec, 0.7, &mut rng);
            for _ in 0..5 {
                let x = spec.sample_base(&mut rng);
                let t = rng.random_range(0.0..1.0);
                let exact = ff.divergence_exact(t, &x).unwrap();
                let n = 20_000;
                let samples: Vec<f64> = (0..n)
                    .map(|_| {
                        let mode = DivergenceMode::rademacher(spec.gen_count, 1, &mut rng);
                        ff.divergence_at(t, &x.coords, &mode)
                    })
                    .collect();
                let mean = samples.iter().sum::<f64>() / n as f64;
                let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let bound = 3.0 * var.sqrt() / (n as f64).sqrt();
                assert!((mean - exact).abs() <= bound.max(1e-12), "{spec}: {mean} vs {exact}");
            }
        }
    }

    #[test]
    fn contraction_zero_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let spec = ManifoldSpec::so(3);
        let ff = random_field(spec, 0.5, &mut rng);
        let x = spec.sample_base(&mut rng).coords;
        let c = ff.adjoint_contractions(0.2, &x, &[0.0; 9], 0.0);
        assert!(c.da_x.iter().chain(&c.g_params.0).all(|v| *v == 0.0));
        assert_eq!(c.dx_dot, ff.velocity_at(0.2, &x));

        let zero = FlowField::new(spec, MlpParams::zeros(architecture_for(&spec))).unwrap();
        let c = zero.adjoint_contractions(0.2, &x, &[0.0; 9], 1.0);
        assert!(c.da_x.iter().all(|v| *v == 0.0));
    }

    /// Dense finite-difference oracle for both channels on every manifold,
    /// at ambient points slightly off the manifold.
    #[test]
    fn contractions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let h = 1e-6;
        let mut all = specs();
        all.push(ManifoldSpec::new(crate::manifolds::ManifoldKind::Euclidean { n: 3 }).unwrap());
        for spec in all {
            let ff = random_field(spec, 0.5, &mut rng);
            let d = spec.ambient_dim;
            let mut x = spec.sample_base(&mut rng).coords;
            x.iter_mut().for_each(|v| *v += 1e-3 * rng.random_range(-1.0..1.0));
            let a_x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a_l = rng.random_range(-1.0..1.0);
            let t = 0.6;
            let scalar = |ff: &FlowField, x: &[f64]| {
                let (v, div) = ff.velocity_and_divergence_at(t, x, &DivergenceMode::Exact);
                v.iter().zip(&a_x).map(|(p, q)| p * q).sum::<f64>() + a_l * div
            };
            let c = ff.adjoint_contractions(t, &x, &a_x, a_l);
            for k in 0..d {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                let fd = (scalar(&ff, &xp) - scalar(&ff, &xm)) / (2.0 * h);
                assert!((fd - c.da_x[k]).abs() < 1e-5, "{spec} x{k}: {fd} vs {}", c.da_x[k]);
            }
            for k in (0..ff.params().n_params()).step_by(11) {
                let (mut fp, mut fm) = (ff.clone(), ff.clone());
                fp.params_mut().values_mut()[k] += h;
                fm.params_mut().values_mut()[k] -= h;
                let fd = (scalar(&fp, &x) - scalar(&fm, &x)) / (2.0 * h);
                assert!((fd - c.g_params.0[k]).abs() < 1e-5, "{spec} param {k}");
            }
        }
    }

    #[test]
    fn flat_space_contraction_is_classical_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let spec = ManifoldSpec::new(crate::manifolds::ManifoldKind::Euclidean { n: 3 }).unwrap();
        let layers = vec![
            LayerShape { inputs: 4, outputs: 6, activation: Activation::Tanh },
            LayerShape { inputs: 6, outputs: 3, activation: Activation::Identity },
        ];
        let mut p = MlpParams::zeros(layers);
        p.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let ff = FlowField::new(spec, p).unwrap();
        let x = [0.3, -0.2, 0.9];
        let a = [1.0, 0.5, -2.0];
        let c = ff.adjoint_contractions(0.1, &x, &a, 0.0);
        let h = 1e-6;
        for k in 0..3 {
            let (mut xp, mut xm) = (x, x);
            xp[k] += h;
            xm[k] -= h;
            let col: Vec<f64> = ff
                .velocity_at(0.1, &xp)
                .iter()
                .zip(ff.velocity_at(0.1, &xm))
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect();
            let expected: f64 = col.iter().zip(&a).map(|(j, ai)| j * ai).sum();
            assert!((c.da_x[k] - expected).abs() < 1e-5);
        }
    }
}
