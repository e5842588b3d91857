//! Experiment configuration: a flat `key = value` TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifolds::{ManifoldKind, ManifoldSpec};
use crate::ode::SolverConfig;
use crate::targets::{TargetFamily, CONJUGATION_COEFFS};
use crate::train::{TrainConfig, TrainDivergence};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("config key `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

/// Every recognised key with its default. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifold: String,
    /// Defaults to the family paired with the manifold.
    pub target_family: Option<String>,
    pub target_beta: f64,
    pub target_k: usize,
    /// JSON file of fixed centers; sampled from the seed when absent.
    pub target_centers: Option<PathBuf>,
    /// Coefficients `c_j` of the conjugation-invariant family.
    pub target_coeffs: Option<Vec<f64>>,

    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub n_steps: usize,
    pub eval_sample_size: usize,
    pub train_divergence: String,

    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub max_steps: usize,
    pub eval_rtol: f64,
    pub eval_atol: f64,

    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let solver = SolverConfig::training();
        let eval = SolverConfig::evaluation();
        Self {
            manifold: String::new(),
            target_family: None,
            target_beta: 10.0,
            target_k: 4,
            target_centers: None,
            target_coeffs: None,
            batch_size: train.batch_size,
            lr: train.lr,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            n_steps: train.n_steps,
            eval_sample_size: train.eval_sample_size,
            train_divergence: train.train_divergence.to_string(),
            rtol: solver.rtol,
            atol: solver.atol,
            h_init: solver.h_init,
            h_min: solver.h_min,
            max_steps: solver.max_steps,
            eval_rtol: eval.rtol,
            eval_atol: eval.atol,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// The typed objects a validated config produces.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub manifold: ManifoldSpec,
    pub family: TargetFamily,
    pub beta: f64,
    pub k: usize,
    pub coeffs: Vec<f64>,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub eval_solver: SolverConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Checks every field and builds the typed experiment.
    pub fn validate(&self) -> Result<Experiment, ConfigError> {
        if self.manifold.trim().is_empty() {
            return Err(invalid("manifold", "missing"));
        }
        if !(self.target_beta > 0.0) || !self.target_beta.is_finite() {
            return Err(invalid("target_beta", format!("must be positive, got {}", self.target_beta)));
        }
        let manifold =
            ManifoldSpec::parse(&self.manifold, Some(self.target_beta)).map_err(|e| invalid("manifold", e.to_string()))?;
        if let ManifoldKind::Spd { beta, .. } = manifold.kind {
            if beta != self.target_beta {
                return Err(invalid(
                    "manifold",
                    format!("SPD degrees of freedom {beta} differ from target_beta {}", self.target_beta),
                ));
            }
        }
        let family = match &self.target_family {
            Some(name) => name.parse::<TargetFamily>().map_err(|e| invalid("target_family", e.to_string()))?,
            None => TargetFamily::default_for(&manifold),
        };
        if !family.supports(&manifold) {
            return Err(invalid("target_family", format!("{family} is not defined on {manifold}")));
        }
        if self.target_k == 0 {
            return Err(invalid("target_k", "must be at least 1"));
        }
        let coeffs = match (&self.target_coeffs, family) {
            (Some(c), TargetFamily::ConjugationInvariant) if c.is_empty() => {
                return Err(invalid("target_coeffs", "must not be empty"));
            }
            (Some(c), TargetFamily::ConjugationInvariant) => c.clone(),
            (None, TargetFamily::ConjugationInvariant) => CONJUGATION_COEFFS[0].to_vec(),
            (Some(_), _) => return Err(invalid("target_coeffs", "only used by conjugation_invariant")),
            (None, _) => Vec::new(),
        };
        let divergence = self
            .train_divergence
            .parse::<TrainDivergence>()
            .map_err(|e| invalid("train_divergence", e))?;
        let train = TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            n_steps: self.n_steps,
            eval_sample_size: self.eval_sample_size,
            seed: self.seed,
            train_divergence: divergence,
        };
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid("lr", "must be positive"));
        }
        for (key, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(invalid(key, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(invalid("adam_eps", "must be positive"));
        }
        if self.eval_sample_size == 0 {
            return Err(invalid("eval_sample_size", "must be at least 1"));
        }
        for (key, v) in [
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("eval_rtol", self.eval_rtol),
            ("eval_atol", self.eval_atol),
            ("h_min", self.h_min),
        ] {
            if !(v > 0.0) {
                return Err(invalid(key, "must be positive"));
            }
        }
        if !(self.h_init > self.h_min) {
            return Err(invalid("h_init", "must exceed h_min"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps", "must be at least 1"));
        }
        let solver = SolverConfig {
            rtol: self.rtol,
            atol: self.atol,
            h_init: self.h_init,
            h_min: self.h_min,
            max_steps: self.max_steps,
        };
        let eval_solver = SolverConfig {
            rtol: self.eval_rtol,
            atol: self.eval_atol,
            ..solver
        };
        Ok(Experiment {
            manifold,
            family,
            beta: self.target_beta,
            k: self.target_k,
            coeffs,
            train,
            solver,
            eval_solver,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("manifold = \"sphere:2\"\nseed = 3\n").unwrap();
        let exp = cfg.validate().unwrap();
        assert_eq!(exp.family, TargetFamily::VonMisesFisher);
        assert_eq!(exp.train.batch_size, 512);
        assert_eq!(exp.train.seed, 3);
        assert_eq!(exp.eval_solver.rtol, 1e-8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("manifold = \"sphere:2\"\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("manifold = \"torus:2\"", "manifold"),
            ("manifold = \"sphere:2\"\nlr = -1.0", "lr"),
            ("manifold = \"sphere:2\"\ntarget_family = \"wishart\"", "target_family"),
            ("manifold = \"sphere:2\"\ntrain_divergence = \"none\"", "train_divergence"),
            ("manifold = \"spd:2:5\"\ntarget_beta = 20.0", "manifold"),
            ("manifold = \"so:3\"\ntarget_coeffs = [1.0]", "target_coeffs"),
            ("manifold = \"sphere:2\"\nh_init = 1e-12", "h_init"),
        ];
        for (text, key) in cases {
            let err = ExperimentConfig::from_toml(text).unwrap().validate().unwrap_err();
            assert!(err.to_string().contains(&format!("`{key}`")), "{text}: {err}");
        }
    }

    #[test]
    fn round_trip() {
        let text = "manifold = \"su:3\"\ntarget_family = \"conjugation_invariant\"\ntarget_beta = 5.0\n\
                    target_coeffs = [0.98, -0.63, -0.21]\nseed = 11\noutput_dir = \"runs/su3\"\nlr = 0.001\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.validate().unwrap().coeffs, vec![0.98, -0.63, -0.21]);
    }

    #[test]
    fn spd_takes_beta_from_target() {
        let cfg = ExperimentConfig::from_toml("manifold = \"spd:2\"\ntarget_beta = 20.0\n").unwrap();
        let exp = cfg.validate().unwrap();
        assert_eq!(exp.manifold, ManifoldSpec::spd(2, 20.0));
        assert_eq!(exp.family, TargetFamily::Wishart);
    }
}
