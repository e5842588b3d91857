//! Adaptive Dormand–Prince 5(4) integration, the forward flow with its
//! log-density channel, and the backward adjoint pass.

use thiserror::Error;

use crate::field::{DivergenceMode, FlowField};
use crate::manifolds::{ManifoldError, ManifoldKind, ManifoldSpec, Point, RETRACT_TRUST_RADIUS, SPD_MIN_PIVOT};
use crate::net::ParamGrad;

/// Endpoint points returned by the flows satisfy their constraint to this.
pub const FLOW_CONSTRAINT_TOL: f64 = 1e-6;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl SolverConfig {
    pub fn training() -> Self {
        Self::with_tolerance(1e-6)
    }

    pub fn evaluation() -> Self {
        Self::with_tolerance(1e-8)
    }

    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            h_init: 0.1,
            h_min: 1e-10,
            max_steps: 100_000,
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        let bad = |what: &str| Err(OdeError::InvalidConfig(what.to_string()));
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if !(self.h_min > 0.0) || !(self.h_min < self.h_init) {
            return bad("need 0 < h_min < h_init");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        Ok(())
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::training()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("step size {h:e} fell below h_min at t = {t}")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {max_steps} steps before reaching t = {t_end}")]
    MaxSteps { max_steps: usize, t_end: f64 },
    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("trajectory aborted at t = {t}: {reason}")]
    Aborted { t: f64, reason: String },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub n_steps: usize,
    pub n_rejected: usize,
    pub n_evals: usize,
}

/// What a post-step hook did with an accepted state.
#[derive(Debug, Clone, PartialEq)]
pub enum HookOutcome {
    Unchanged,
    Modified,
    /// Throw the step away and retry with a smaller one.
    Reject,
    Abort(String),
}

pub type Hook<'a> = dyn FnMut(f64, &mut [f64]) -> HookOutcome + 'a;

// Dormand–Prince tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
pub fn integrate<F>(
    dynamics: F,
    y0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    mut hook: Option<&mut Hook<'_>>,
) -> Result<(Vec<f64>, SolveStats), OdeError>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    cfg.validate()?;
    let n = y0.len();
    let mut stats = SolveStats::default();
    let mut y = y0.to_vec();
    if t0 == t1 {
        return Ok((y, stats));
    }
    let dir = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut h = cfg.h_init.min(span);

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let eval = |t: f64, y: &[f64], out: &mut [f64], stats: &mut SolveStats| -> Result<(), OdeError> {
        dynamics(t, y, out);
        stats.n_evals += 1;
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(OdeError::NonFinite { t })
        }
    };
    eval(t, &y, &mut k[0], &mut stats)?;
    let mut attempts = 0usize;
    let mut last_rejected = false;

    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= span * 1e-14 {
            break;
        }
        if attempts >= cfg.max_steps {
            return Err(OdeError::MaxSteps {
                max_steps: cfg.max_steps,
                t_end: t1,
            });
        }
        attempts += 1;
        let final_step = h >= remaining;
        let step = if final_step { remaining } else { h };
        let hs = dir * step;

        for s in 1..7 {
            for j in 0..n {
                let mut acc = 0.0;
                for (q, a) in A[s][..s].iter().enumerate() {
                    acc += a * k[q][j];
                }
                stage[j] = y[j] + hs * acc;
            }
            let (head, tail) = k.split_at_mut(s);
            let _ = head;
            eval(t + C[s] * hs, &stage, &mut tail[0], &mut stats)?;
            if s == 6 {
                y_new.copy_from_slice(&stage);
            }
        }

        let mut sq = 0.0;
        for j in 0..n {
            let mut err = 0.0;
            for (q, e) in E.iter().enumerate() {
                err += e * k[q][j];
            }
            let scale = cfg.atol + cfg.rtol * y[j].abs().max(y_new[j].abs());
            let r = hs * err / scale;
            sq += r * r;
        }
        let err_norm = if n == 0 { 0.0 } else { (sq / n as f64).sqrt() };
        let factor = if err_norm == 0.0 {
            MAX_FACTOR
        } else {
            (SAFETY * err_norm.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
        };

        if err_norm <= 1.0 {
            let t_next = if final_step { t1 } else { t + hs };
            let outcome = match hook.as_mut() {
                Some(hk) => hk(t_next, &mut y_new),
                None => HookOutcome::Unchanged,
            };
            match outcome {
                HookOutcome::Reject => {
                    stats.n_rejected += 1;
                    h = step * MIN_FACTOR;
                    last_rejected = true;
                }
                HookOutcome::Abort(reason) => return Err(OdeError::Aborted { t: t_next, reason }),
                HookOutcome::Unchanged | HookOutcome::Modified => {
                    stats.n_steps += 1;
                    t = t_next;
                    std::mem::swap(&mut y, &mut y_new);
                    if outcome == HookOutcome::Modified {
                        eval(t, &y, &mut k[0], &mut stats)?;
                    } else {
                        k.swap(0, 6);
                    }
                    let grow = if last_rejected { factor.min(1.0) } else { factor };
                    if !final_step || grow < 1.0 {
                        h = step * grow;
                    }
                    last_rejected = false;
                }
            }
        } else {
            stats.n_rejected += 1;
            h = step * factor;
            last_rejected = true;
        }
        if last_rejected && h < cfg.h_min {
            return Err(OdeError::StepUnderflow { t, h });
        }
    }
    Ok((y, stats))
}

/// Post-step projection of the point block `y[..D]` back onto the
/// manifold. Steps whose drift exceeds the retraction trust radius are
/// rejected; an SPD state that is no longer positive definite aborts.
pub fn manifold_hook(spec: ManifoldSpec) -> impl FnMut(f64, &mut [f64]) -> HookOutcome {
    move |_t, y| {
        let x = &mut y[..spec.ambient_dim];
        if let ManifoldKind::Spd { n, .. } = spec.kind {
            let pivot = crate::manifolds::spd_matrix(n, x).min_cholesky_pivot();
            if !(pivot > SPD_MIN_PIVOT) {
                return HookOutcome::Abort(ManifoldError::PositivityLost { pivot }.to_string());
            }
            return HookOutcome::Unchanged;
        }
        if !(spec.constraint_residual(x) <= RETRACT_TRUST_RADIUS) {
            return HookOutcome::Reject;
        }
        match spec.retract_in_place(x) {
            Ok(true) => HookOutcome::Modified,
            Ok(false) => HookOutcome::Unchanged,
            Err(_) => HookOutcome::Reject,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub point: Point,
    pub delta_logp: f64,
    pub n_steps: usize,
    pub n_rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointResult {
    pub grad_params: ParamGrad,
    pub grad_x0: Vec<f64>,
    /// The start point recovered by the reverse integration.
    pub x0: Vec<f64>,
    pub n_steps: usize,
    pub n_rejected: usize,
}

/// Carries `(x, ℓ)` from `t_from` to `t_to` under `ẋ = X_t(x)`,
/// `ℓ̇ = −div X_t(x)`, starting from `ℓ = logp`. Returns the end point and
/// `ℓ(t_to) − logp`.
pub fn transport(
    ff: &FlowField,
    x: &[f64],
    logp: f64,
    t_from: f64,
    t_to: f64,
    mode: &DivergenceMode,
    cfg: &SolverConfig,
) -> Result<FlowResult, OdeError> {
    let spec = *ff.spec();
    let d = spec.ambient_dim;
    let mut y0 = x.to_vec();
    y0.push(logp);
    let dynamics = |t: f64, y: &[f64], out: &mut [f64]| {
        let (v, div) = ff.velocity_and_divergence_at(t, &y[..d], mode);
        out[..d].copy_from_slice(&v);
        out[d] = -div;
    };
    let mut hook = manifold_hook(spec);
    let (y1, stats) = integrate(dynamics, &y0, t_from, t_to, cfg, Some(&mut hook))?;
    let point = Point::new(spec, y1[..d].to_vec(), FLOW_CONSTRAINT_TOL)?;
    Ok(FlowResult {
        point,
        delta_logp: y1[d] - logp,
        n_steps: stats.n_steps,
        n_rejected: stats.n_rejected,
    })
}

/// The flow over `t ∈ [0, 1]`.
pub fn forward_flow(
    ff: &FlowField,
    x0: &Point,
    logp0: f64,
    mode: &DivergenceMode,
    cfg: &SolverConfig,
) -> Result<FlowResult, OdeError> {
    transport(ff, &x0.coords, logp0, 0.0, 1.0, mode, cfg)
}

/// Integrates `(x, a_x, a_ℓ, g_λ)` from `t = 1` back to `t = 0`, starting
/// at `(x1, a_x1, a_ℓ1, 0)`. `a_x` and `a_ℓ` are the loss sensitivities to
/// the point and to the log-density channel; the returned `grad_params` is
/// `g_λ(0) = dL/dλ` and `grad_x0` is `a_x(0)`.
pub fn backward_adjoint(
    ff: &FlowField,
    x1: &Point,
    a_x1: &[f64],
    a_l1: f64,
    cfg: &SolverConfig,
) -> Result<AdjointResult, OdeError> {
    let spec = *ff.spec();
    let d = spec.ambient_dim;
    let p = ff.params().n_params();
    assert_eq!(a_x1.len(), d, "adjoint seed length");
    let mut y0 = Vec::with_capacity(2 * d + 1 + p);
    y0.extend_from_slice(&x1.coords);
    y0.extend_from_slice(a_x1);
    y0.push(a_l1);
    y0.resize(2 * d + 1 + p, 0.0);

    let dynamics = |t: f64, y: &[f64], out: &mut [f64]| {
        let (x, a_x, a_l) = (&y[..d], &y[d..2 * d], y[2 * d]);
        let (head, g_out) = out.split_at_mut(2 * d + 1);
        g_out.iter_mut().for_each(|v| *v = 0.0);
        // ℓ̇ = −div, so the ℓ cotangent enters the contraction with a minus sign
        let (dx, da) = ff.adjoint_contractions_into(t, x, a_x, -a_l, g_out, -1.0);
        head[..d].copy_from_slice(&dx);
        for (o, v) in head[d..2 * d].iter_mut().zip(&da) {
            *o = -v;
        }
        head[2 * d] = 0.0;
    };
    let mut hook = manifold_hook(spec);
    let (y, stats) = integrate(dynamics, &y0, 1.0, 0.0, cfg, Some(&mut hook))?;
    Ok(AdjointResult {
        grad_params: ParamGrad(y[2 * d + 1..].to_vec()),
        grad_x0: y[d..2 * d].to_vec(),
        x0: y[..d].to_vec(),
        n_steps: stats.n_steps,
        n_rejected: stats.n_rejected,
    })
}
