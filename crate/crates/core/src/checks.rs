//! Runtime property suite behind `mcnf check`, also driven by the
//! acceptance tests. Each check reports its measured residual next to the
//! threshold it was held to.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::densemat::{ComplexMatrix, RealMatrix};
use crate::field::{DivergenceMode, FlowField};
use crate::manifolds::ManifoldSpec;
use crate::net::{architecture_for, MlpParams};
use crate::ode::{forward_flow, SolverConfig};
use crate::targets::{sample_centers, TargetFamily, TargetSpec};
use crate::train::{evaluate, kl_loss_batch, TrainConfig, TrainDivergence};
use num_complex::Complex64;

/// Evaluates generator `i` of `spec` at ambient `x` into `out`. The check
/// functions take one of these so tests can substitute a broken generator.
pub type GeneratorFn = fn(&ManifoldSpec, &[f64], usize, &mut [f64]);

pub fn standard_generator(spec: &ManifoldSpec, x: &[f64], i: usize, out: &mut [f64]) {
    spec.generator_into(x, i, out);
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    /// Worst value observed.
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<34} measured {:>11.3e}  threshold {:>9.2e}  ({:.1}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold,
            self.seconds,
            self.detail
        )
    }
}

fn outcome(name: &str, measured: f64, threshold: f64, passed: bool, detail: String, start: Instant) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        measured,
        threshold,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Manifolds covered by the geometric checks.
pub fn gate_manifolds() -> Vec<ManifoldSpec> {
    vec![
        ManifoldSpec::sphere(1),
        ManifoldSpec::sphere(2),
        ManifoldSpec::sphere(3),
        ManifoldSpec::so(2),
        ManifoldSpec::so(3),
        ManifoldSpec::u(1),
        ManifoldSpec::u(2),
        ManifoldSpec::u(3),
        ManifoldSpec::su(2),
        ManifoldSpec::su(3),
        ManifoldSpec::stiefel(1, 3),
        ManifoldSpec::stiefel(2, 3),
        ManifoldSpec::stiefel(2, 4),
        ManifoldSpec::spd(2, 20.0),
    ]
}

pub fn check_generator_tangency(generator: GeneratorFn, n_points: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut where_) = (0.0f64, String::new());
    for spec in gate_manifolds() {
        let mut v = vec![0.0; spec.ambient_dim];
        for _ in 0..n_points {
            let x = spec.sample_base(&mut rng);
            for i in 0..spec.gen_count {
                generator(&spec, &x.coords, i, &mut v);
                let r = spec.is_tangent(&x, &v);
                if !(r <= worst) {
                    worst = r;
                    where_ = format!("worst on {spec}, generator {i}");
                }
            }
        }
    }
    outcome("generator tangency", worst, 1e-10, worst <= 1e-10, where_, start)
}

pub fn check_gram_rank(generator: GeneratorFn, n_points: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut detail = String::new();
    for spec in gate_manifolds() {
        for _ in 0..n_points {
            let x = spec.sample_base(&mut rng);
            let gens: Vec<Vec<f64>> = (0..spec.gen_count)
                .map(|i| {
                    let mut v = vec![0.0; spec.ambient_dim];
                    generator(&spec, &x.coords, i, &mut v);
                    v
                })
                .collect();
            let mut g = RealMatrix::zeros(spec.gen_count, spec.gen_count);
            for i in 0..spec.gen_count {
                for j in 0..spec.gen_count {
                    g[(i, j)] = gens[i].iter().zip(&gens[j]).map(|(a, b)| a * b).sum();
                }
            }
            let rank = g.rank(1e-9);
            if rank != spec.intrinsic_dim {
                failures += 1;
                detail = format!("{spec}: rank {rank}, expected {}", spec.intrinsic_dim);
            }
        }
    }
    outcome("generator Gram rank", failures as f64, 0.0, failures == 0, detail, start)
}

pub fn check_haar_constraints(n_points: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for spec in gate_manifolds() {
        for _ in 0..n_points {
            let r = spec.check_constraint(&spec.sample_base(&mut rng));
            if !(r <= worst) {
                worst = r;
                detail = format!("worst on {spec}");
            }
        }
    }
    outcome("Haar sample constraints", worst, 1e-10, worst <= 1e-10, detail, start)
}

fn permutation_parity(p: &[usize]) -> f64 {
    let mut inversions = 0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if p[i] > p[j] {
                inversions += 1;
            }
        }
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Leibniz-formula determinant, an oracle independent of LU.
fn leibniz_det(a: &RealMatrix) -> f64 {
    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }
    let n = a.rows();
    permutations(n)
        .iter()
        .map(|p| permutation_parity(p) * (0..n).map(|i| a[(i, p[i])]).product::<f64>())
        .sum()
}

pub fn check_dense_oracles(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut track = |r: f64| worst = worst.max(if r.is_nan() { f64::INFINITY } else { r });
    let random = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        RealMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    for _ in 0..20 {
        let a = random(4, 4, &mut rng);
        let (q, r) = a.qr().expect("random matrix has full rank");
        track(q.matmul(&r).sub(&a).frobenius_norm());
        track(q.transpose().matmul(&q).sub(&RealMatrix::identity(4)).frobenius_norm());
        track((1..4).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| r[(i, j)].abs()).fold(0.0, f64::max));

        let b = random(5, 5, &mut rng);
        track((b.determinant() - leibniz_det(&b)).abs());

        let s = random(3, 3, &mut rng);
        let skew = s.sub(&s.transpose());
        track(skew.expm().matmul(&skew.scale(-1.0).expm()).sub(&RealMatrix::identity(3)).frobenius_norm());

        let theta = rng.random_range(-3.0..3.0);
        let gen = RealMatrix::from_rows(&[&[0.0, -theta], &[theta, 0.0]]);
        let rot = RealMatrix::from_rows(&[&[theta.cos(), -theta.sin()], &[theta.sin(), theta.cos()]]);
        track(gen.expm().sub(&rot).frobenius_norm());

        let phase = ComplexMatrix::identity(2).scale(Complex64::new(0.0, theta));
        let expected = ComplexMatrix::identity(2).scale(Complex64::from_polar(1.0, theta));
        track(phase.expm().sub(&expected).frobenius_norm());
    }
    outcome("QR / det / expm oracles", worst, 1e-10, worst <= 1e-10, String::new(), start)
}

fn random_field(spec: ManifoldSpec, scale: f64, rng: &mut ChaCha8Rng) -> FlowField {
    let mut p = MlpParams::zeros(architecture_for(&spec));
    p.values_mut().iter_mut().for_each(|v| *v = scale * rng.random_range(-1.0..1.0));
    FlowField::new(spec, p).expect("architecture built for spec")
}

/// Worst |mean − exact| in units of the 3σ/√N bound (pass when ≤ 1).
pub fn check_estimator_unbiased(n_probes: usize, n_points: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for spec in [ManifoldSpec::sphere(2), ManifoldSpec::so(3)] {
        let ff = random_field(spec, 0.7, &mut rng);
        for _ in 0..n_points {
            let x = spec.sample_base(&mut rng);
            let t = rng.random_range(0.0..1.0);
            let exact = ff.divergence_at(t, &x.coords, &DivergenceMode::Exact);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n_probes {
                let e = ff.divergence_at(t, &x.coords, &DivergenceMode::rademacher(spec.gen_count, 1, &mut rng));
                s1 += e;
                s2 += e * e;
            }
            let n = n_probes as f64;
            let mean = s1 / n;
            let sd = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0).sqrt();
            let bound = 3.0 * sd / n.sqrt();
            let ratio = if bound > 0.0 {
                (mean - exact).abs() / bound
            } else if (mean - exact).abs() <= 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            if ratio > worst {
                worst = ratio;
                detail = format!("{spec}: mean {mean:.6e}, exact {exact:.6e}");
            }
        }
    }
    outcome("divergence estimator unbiased", worst, 1.0, worst <= 1.0, detail, start)
}

/// Constant-coefficient flows on SO(3) and SU(2) against `a·expm(Σ c_i v_i)`.
pub fn check_closed_form_flows(seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SolverConfig::with_tolerance(1e-8);
    let mut worst = 0.0f64;
    let mut worst_logp = 0.0f64;
    for spec in [ManifoldSpec::so(3), ManifoldSpec::su(2)] {
        for _ in 0..5 {
            let c: Vec<f64> = (0..spec.gen_count).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut p = MlpParams::zeros(architecture_for(&spec));
            let last = p.layers().len() - 1;
            p.layer_mut(last).1.copy_from_slice(&c);
            let ff = FlowField::new(spec, p).expect("architecture built for spec");
            let x0 = spec.sample_base(&mut rng);
            let r = match forward_flow(&ff, &x0, 0.0, &DivergenceMode::Exact, &cfg) {
                Ok(r) => r,
                Err(e) => {
                    return outcome("closed-form group flows", f64::INFINITY, 1e-6, false, e.to_string(), start);
                }
            };
            let mut lie = ComplexMatrix::zeros(spec.n(), spec.n());
            for (i, ci) in c.iter().enumerate() {
                let v = spec.lie_algebra_element(i).expect("group generator");
                lie = lie.add(&v.scale(Complex64::new(*ci, 0.0)));
            }
            let a0 = match spec.complex_matrix(&x0.coords) {
                Some(m) => m,
                None => ComplexMatrix::from_real(spec.real_matrix(&x0.coords).expect("matrix manifold")),
            };
            let expected = a0.matmul(&lie.expm());
            let flat = if spec.is_complex() { expected.to_flat() } else { expected.re.into_vec() };
            let err = r.point.coords.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            worst_logp = worst_logp.max(r.delta_logp.abs());
        }
    }
    let passed = worst <= 1e-6 && worst_logp == 0.0;
    outcome(
        "closed-form group flows",
        worst,
        1e-6,
        passed,
        format!("max |delta_logp| {worst_logp:e}"),
        start,
    )
}

/// KL-loss gradient by the adjoint against central differences on randomly
/// chosen parameters.
pub fn check_adjoint_gradient(spec: ManifoldSpec, n_params: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::init(&spec, &mut rng);
    // undo the small output-layer init so every layer carries gradient
    let last = params.layers().len() - 1;
    params.layer_mut(last).0.iter_mut().for_each(|v| *v *= 30.0);
    let ff = FlowField::new(spec, params).expect("architecture built for spec");
    let family = TargetFamily::default_for(&spec);
    let centers = sample_centers(&spec, 4, &mut rng).expect("compact manifold");
    let target = TargetSpec::new(spec, family, 5.0, centers).expect("valid target");
    let cfg = TrainConfig {
        batch_size: 4,
        seed,
        train_divergence: TrainDivergence::Exact,
        ..TrainConfig::default()
    };
    let solver = SolverConfig::with_tolerance(1e-10);
    let name = format!("adjoint gradient {spec}");
    let base = match kl_loss_batch(&ff, &target, &cfg, &solver, 0) {
        Ok(b) => b,
        Err(e) => return outcome(&name, f64::INFINITY, 1e-3, false, e.to_string(), start),
    };
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for _ in 0..n_params {
        let k = rng.random_range(0..ff.params().n_params());
        let loss = |delta: f64| {
            let mut f = ff.clone();
            f.params_mut().values_mut()[k] += delta;
            kl_loss_batch(&f, &target, &cfg, &solver, 0).map(|b| b.loss)
        };
        let (Ok(lp), Ok(lm)) = (loss(h), loss(-h)) else {
            return outcome(&name, f64::INFINITY, 1e-3, false, "solver failure".into(), start);
        };
        let fd = (lp - lm) / (2.0 * h);
        let g = base.grad.0[k];
        let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
            detail = format!("param {k}: adjoint {g:.6e}, fd {fd:.6e}");
        }
    }
    outcome(&name, worst, 1e-3, worst <= 1e-3, detail, start)
}

/// Zero-parameter flow against target = base: ESS = 100 % ± 0.1 and |KL| ≤ 3/√S.
pub fn check_identity_calibration(spec: ManifoldSpec, n_samples: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let ff = FlowField::new(spec, MlpParams::zeros(architecture_for(&spec))).expect("architecture built for spec");
    let cfg = TrainConfig {
        eval_sample_size: n_samples,
        seed,
        ..TrainConfig::default()
    };
    let r = evaluate(&ff, &TargetSpec::base(spec), &cfg, &SolverConfig::evaluation());
    let kl_bound = 3.0 / (n_samples as f64).sqrt();
    let passed = (r.ess_percent - 100.0).abs() <= 0.1 && r.kl_nats.abs() <= kl_bound && r.n_failed == 0;
    outcome(
        &format!("identity calibration {spec}"),
        r.kl_nats.abs(),
        kl_bound,
        passed,
        format!("ESS {:.4}%, S = {}", r.ess_percent, r.n_samples),
        start,
    )
}

/// The full gate run by `mcnf check`.
pub fn run_all(generator: GeneratorFn, seed: u64) -> Vec<CheckOutcome> {
    vec![
        check_generator_tangency(generator, 100, seed),
        check_gram_rank(generator, 100, seed + 1),
        check_haar_constraints(100, seed + 2),
        check_dense_oracles(seed + 3),
        check_estimator_unbiased(100_000, 20, seed + 4),
        check_closed_form_flows(seed + 5),
        check_adjoint_gradient(ManifoldSpec::sphere(2), 10, seed + 6),
        check_adjoint_gradient(ManifoldSpec::so(3), 10, seed + 7),
        check_identity_calibration(ManifoldSpec::sphere(2), 20_000, seed + 8),
        check_identity_calibration(ManifoldSpec::so(3), 20_000, seed + 9),
    ]
}
