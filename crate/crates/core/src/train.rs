//! Reverse-KL training with Adam, and importance-sampling evaluation.
//!
//! Randomness is drawn from per-sample ChaCha streams keyed by
//! `(seed, purpose, step, index)`, so a batch gives the same numbers
//! however many worker threads share it. Batch reductions run in index
//! order for the same reason.

use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{DivergenceMode, FlowField};
use crate::net::{MlpParams, ParamGrad};
use crate::ode::{backward_adjoint, forward_flow, OdeError, SolverConfig};
use crate::targets::TargetSpec;

/// A batch fails when more than this fraction of its trajectories fail.
pub const MAX_DROP_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("{dropped} of {total} trajectories failed (last error: {last})")]
    TooManyFailures { dropped: usize, total: usize, last: OdeError },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// How the log-density channel is evaluated in the training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainDivergence {
    /// One Rademacher probe per trajectory.
    Hutchinson,
    Exact,
}

impl FromStr for TrainDivergence {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hutchinson" => Ok(TrainDivergence::Hutchinson),
            "exact" => Ok(TrainDivergence::Exact),
            other => Err(format!("expected \"hutchinson\" or \"exact\", got {other:?}")),
        }
    }
}

impl std::fmt::Display for TrainDivergence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainDivergence::Hutchinson => "hutchinson",
            TrainDivergence::Exact => "exact",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_steps: usize,
    pub eval_sample_size: usize,
    pub seed: u64,
    pub train_divergence: TrainDivergence,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            lr: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            n_steps: 5000,
            eval_sample_size: 200_000,
            seed: 0,
            train_divergence: TrainDivergence::Hutchinson,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.eval_sample_size == 0 {
            return bad("eval_sample_size must be at least 1");
        }
        Ok(())
    }
}

/// Stream purposes, so training, evaluation and center draws never share
/// random numbers.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    Train = 1,
    Eval = 2,
    Centers = 3,
    Init = 4,
}

/// Deterministic generator for one `(seed, purpose, step, index)` cell.
pub fn stream_rng(seed: u64, purpose: Stream, step: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, purpose as u64, step, index]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let n = params.n_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut MlpParams, grad: &ParamGrad, state: &mut AdamState, cfg: &TrainConfig) {
    assert_eq!(grad.0.len(), params.n_params(), "gradient shape");
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.values_mut().iter_mut().zip(&grad.0).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub loss: f64,
    pub grad: ParamGrad,
    pub n_used: usize,
    pub n_dropped: usize,
    /// Mean accepted ODE steps per trajectory, forward plus backward.
    pub n_ode_steps_mean: f64,
}

/// Loss and gradient contribution of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult {
    pub loss: f64,
    pub grad: ParamGrad,
    pub n_steps: usize,
}

/// The `index`-th trajectory of batch `step`.
pub fn kl_sample(
    ff: &FlowField,
    target: &TargetSpec,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    step: u64,
    index: u64,
) -> Result<SampleResult, OdeError> {
    let spec = ff.spec();
    let mut rng = stream_rng(cfg.seed, Stream::Train, step, index);
    let x0 = spec.sample_base(&mut rng);
    let logp0 = spec.base_log_density0(&x0);
    let mode = match cfg.train_divergence {
        TrainDivergence::Hutchinson => DivergenceMode::rademacher(spec.gen_count, 1, &mut rng),
        TrainDivergence::Exact => DivergenceMode::Exact,
    };
    let fwd = forward_flow(ff, &x0, logp0, &mode, solver)?;
    let (log_target, grad_target) = target.value_and_grad_at(&fwd.point.coords);
    let loss = logp0 + fwd.delta_logp - log_target;
    let a_x1: Vec<f64> = grad_target.iter().map(|g| -g).collect();
    let adj = backward_adjoint(ff, &fwd.point, &a_x1, 1.0, solver)?;
    if !loss.is_finite() || adj.grad_params.0.iter().any(|g| !g.is_finite()) {
        return Err(OdeError::NonFinite { t: 1.0 });
    }
    Ok(SampleResult {
        loss,
        grad: adj.grad_params,
        n_steps: fwd.n_steps + adj.n_steps,
    })
}

/// Monte-Carlo estimate of `E[log ρ_λ − log ρ*]` over a batch of flowed
/// base samples, and its parameter gradient by the adjoint method.
pub fn kl_loss_batch(
    ff: &FlowField,
    target: &TargetSpec,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    step: u64,
) -> Result<BatchResult, TrainError> {
    let outs: Vec<Result<SampleResult, OdeError>> = (0..cfg.batch_size as u64)
        .into_par_iter()
        .map(|i| kl_sample(ff, target, cfg, solver, step, i))
        .collect();
    let mut grad = ParamGrad::zeros_like(ff.params());
    let (mut loss, mut steps, mut used) = (0.0, 0usize, 0usize);
    let mut last_err = None;
    for out in outs {
        match out {
            Ok(s) => {
                loss += s.loss;
                steps += s.n_steps;
                used += 1;
                for (g, v) in grad.0.iter_mut().zip(&s.grad.0) {
                    *g += v;
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let dropped = cfg.batch_size - used;
    if let Some(last) = last_err {
        if dropped as f64 > MAX_DROP_FRACTION * cfg.batch_size as f64 || used == 0 {
            return Err(TrainError::TooManyFailures {
                dropped,
                total: cfg.batch_size,
                last,
            });
        }
    }
    let inv = 1.0 / used as f64;
    grad.0.iter_mut().for_each(|g| *g *= inv);
    Ok(BatchResult {
        loss: loss * inv,
        grad,
        n_used: used,
        n_dropped: dropped,
        n_ode_steps_mean: steps as f64 * inv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub n_ode_steps_mean: f64,
    pub n_dropped: usize,
}

/// Runs `cfg.n_steps` Adam steps, reporting each one to `on_step`.
pub fn train<F: FnMut(&StepLog)>(
    ff: &mut FlowField,
    target: &TargetSpec,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    mut on_step: F,
) -> Result<AdamState, TrainError> {
    cfg.validate()?;
    let mut state = AdamState::new(ff.params());
    for step in 0..cfg.n_steps {
        let start = Instant::now();
        let batch = kl_loss_batch(ff, target, cfg, solver, step as u64)?;
        adam_step(ff.params_mut(), &batch.grad, &mut state, cfg);
        on_step(&StepLog {
            step,
            loss: batch.loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            n_ode_steps_mean: batch.n_ode_steps_mean,
            n_dropped: batch.n_dropped,
        });
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub kl_nats: f64,
    pub ess_percent: f64,
    pub z_hat: f64,
    pub log_z_hat: f64,
    pub n_samples: usize,
    pub n_failed: usize,
}

/// One evaluated model sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub coords: Vec<f64>,
    pub log_model: f64,
    pub log_target: f64,
}

/// ESS in percent from log importance weights.
pub fn ess_from_log_weights(log_w: &[f64]) -> f64 {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for lw in log_w {
        let w = (lw - max).exp();
        s1 += w;
        s2 += w * w;
    }
    100.0 * s1 * s1 / (log_w.len() as f64 * s2)
}

/// ESS in percent from raw importance weights.
pub fn ess_percent(weights: &[f64]) -> f64 {
    let s1: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    100.0 * s1 * s1 / (weights.len() as f64 * s2)
}

/// KL, ESS and normalizer estimates from paired model and target log
/// densities at model samples.
pub fn importance_report(log_model: &[f64], log_target: &[f64], n_failed: usize) -> EvalReport {
    assert_eq!(log_model.len(), log_target.len());
    let s = log_model.len() as f64;
    let log_w: Vec<f64> = log_target.iter().zip(log_model).map(|(t, m)| t - m).collect();
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_w_scaled = log_w.iter().map(|lw| (lw - max).exp()).sum::<f64>() / s;
    let log_z_hat = max + mean_w_scaled.ln();
    let mean_gap = log_w.iter().map(|lw| -lw).sum::<f64>() / s;
    EvalReport {
        kl_nats: mean_gap + log_z_hat,
        ess_percent: ess_from_log_weights(&log_w),
        z_hat: log_z_hat.exp(),
        log_z_hat,
        n_samples: log_model.len(),
        n_failed,
    }
}

/// Flows `cfg.eval_sample_size` base samples with the exact divergence and
/// scores them against the target. Streams are keyed by `eval_seed`.
pub fn evaluate_samples(
    ff: &FlowField,
    target: &TargetSpec,
    n_samples: usize,
    eval_seed: u64,
    solver: &SolverConfig,
) -> (Vec<EvalSample>, usize) {
    let spec = ff.spec();
    let outs: Vec<Option<EvalSample>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(eval_seed, Stream::Eval, 0, i);
            let x0 = spec.sample_base(&mut rng);
            let logp0 = spec.base_log_density0(&x0);
            let fwd = forward_flow(ff, &x0, logp0, &DivergenceMode::Exact, solver).ok()?;
            let log_target = target.log_target_at(&fwd.point.coords);
            Some(EvalSample {
                log_model: logp0 + fwd.delta_logp,
                log_target,
                coords: fwd.point.coords,
            })
        })
        .collect();
    let failed = outs.iter().filter(|o| o.is_none()).count();
    (outs.into_iter().flatten().collect(), failed)
}

pub fn evaluate(ff: &FlowField, target: &TargetSpec, cfg: &TrainConfig, solver: &SolverConfig) -> EvalReport {
    let (samples, failed) = evaluate_samples(ff, target, cfg.eval_sample_size, cfg.seed, solver);
    report_from_samples(&samples, failed)
}

pub fn report_from_samples(samples: &[EvalSample], failed: usize) -> EvalReport {
    let lm: Vec<f64> = samples.iter().map(|s| s.log_model).collect();
    let lt: Vec<f64> = samples.iter().map(|s| s.log_target).collect();
    importance_report(&lm, &lt, failed)
}
