//! The `mcnf` experiment driver: `train`, `eval` and `check` subcommands.

pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::checks::{run_all, standard_generator};
use crate::field::FlowField;
use crate::manifolds::Point;
use crate::net::{read_checkpoint, write_checkpoint, MlpParams, NetError};
use crate::targets::{sample_centers, TargetError, TargetFamily, TargetSpec};
use crate::train::{evaluate_samples, report_from_samples, stream_rng, train, EvalReport, Stream, StepLog, TrainError};

pub use config::{ConfigError, Experiment, ExperimentConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const CENTERS_FILE: &str = "centers.json";

/// Seed of the property suite run by `check`.
pub const CHECK_SEED: u64 = 20_240_601;

#[derive(Debug, Parser)]
#[command(name = "mcnf", version, about = "Continuous normalizing flows on manifolds")]
pub struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Overrides the config seed. For `eval` it reseeds only the evaluation draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Where `eval` dumps per-sample coordinates and log densities.
    #[arg(long, global = true)]
    pub samples_out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow and write checkpoint, log, evaluation and centers.
    Train { config: PathBuf },
    /// Score a checkpoint against the configured target.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Run the built-in property suite.
    Check,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: NetError },
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("centers {path}: {message}")]
    Centers { path: PathBuf, message: String },
    #[error("target: {0}")]
    Target(#[from] TargetError),
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error("{failed} of {total} checks failed")]
    Checks { failed: usize, total: usize },
    #[error("thread pool: {0}")]
    Threads(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Contents of `eval.json`.
#[derive(Debug, Serialize)]
pub struct EvalFile<'a> {
    pub kl_nats: f64,
    pub ess_percent: f64,
    pub z_hat: f64,
    pub log_z_hat: f64,
    pub n_samples: usize,
    pub n_failed: usize,
    pub eval_seed: u64,
    pub checkpoint_seed: u64,
    pub wall_ms: f64,
    pub config: &'a ExperimentConfig,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    match &cli.command {
        Command::Train { config } => cmd_train(config, cli.seed),
        Command::Eval { checkpoint, config } => cmd_eval(checkpoint, config, cli.seed, cli.samples_out.as_deref()),
        Command::Check => cmd_check(),
    }
}

fn load_centers(path: &Path, exp: &Experiment) -> Result<Vec<Point>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    output::parse_centers(&text, &exp.manifold).map_err(|message| CliError::Centers {
        path: path.to_path_buf(),
        message,
    })
}

/// The target a run uses. Centers come from `centers` when given, otherwise
/// from the centers stream of `seed`.
pub fn build_target(exp: &Experiment, centers: Option<Vec<Point>>, seed: u64) -> Result<TargetSpec, CliError> {
    Ok(match exp.family {
        TargetFamily::Base => TargetSpec::base(exp.manifold),
        TargetFamily::ConjugationInvariant => {
            TargetSpec::conjugation_invariant(exp.manifold, exp.beta, vec![exp.coeffs.clone()])?
        }
        family => {
            let centers = match centers {
                Some(c) => c,
                None => sample_centers(&exp.manifold, exp.k, &mut stream_rng(seed, Stream::Centers, 0, 0))?,
            };
            TargetSpec::new(exp.manifold, family, exp.beta, centers)?
        }
    })
}

fn write_eval(
    path: &Path,
    report: &EvalReport,
    eval_seed: u64,
    checkpoint_seed: u64,
    wall_ms: f64,
    cfg: &ExperimentConfig,
) -> Result<(), CliError> {
    let file = EvalFile {
        kl_nats: report.kl_nats,
        ess_percent: report.ess_percent,
        z_hat: report.z_hat,
        log_z_hat: report.log_z_hat,
        n_samples: report.n_samples,
        n_failed: report.n_failed,
        eval_seed,
        checkpoint_seed,
        wall_ms,
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&file).expect("eval report serializes");
    text.push('\n');
    output::write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let exp = cfg.validate()?;
    let centers = cfg.target_centers.as_deref().map(|p| load_centers(p, &exp)).transpose()?;
    let target = build_target(&exp, centers, cfg.seed)?;
    let params = MlpParams::init(&exp.manifold, &mut stream_rng(cfg.seed, Stream::Init, 0, 0));
    let mut ff = FlowField::new(exp.manifold, params).map_err(|e| CliError::Architecture(e.to_string()))?;

    let dir = &cfg.output_dir;
    eprintln!(
        "training {} parameters on {} ({} target, k = {}), {} steps of batch {}",
        ff.params().n_params(),
        exp.manifold,
        exp.family,
        target.k(),
        exp.train.n_steps,
        exp.train.batch_size
    );
    let start = Instant::now();
    let mut log: Vec<StepLog> = Vec::with_capacity(exp.train.n_steps);
    let every = (exp.train.n_steps / 50).max(1);
    let n_steps = exp.train.n_steps;
    train(&mut ff, &target, &exp.train, &exp.solver, |s| {
        if s.step % every == 0 || s.step + 1 == n_steps {
            eprintln!(
                "step {:>6}  loss {:>10.5}  ode steps {:>6.1}  dropped {}  {:.0} ms",
                s.step, s.loss, s.n_ode_steps_mean, s.n_dropped, s.wall_ms
            );
        }
        log.push(s.clone());
    })?;
    eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());

    let mut ckpt = Vec::new();
    write_checkpoint(&mut ckpt, &exp.manifold.to_string(), cfg.seed, ff.params()).map_err(|source| {
        CliError::Checkpoint {
            path: dir.join(CHECKPOINT_FILE),
            source,
        }
    })?;
    let files: [(&str, Vec<u8>); 3] = [
        (CHECKPOINT_FILE, ckpt),
        (TRAIN_LOG_FILE, output::train_log_csv(&log).into_bytes()),
        (CENTERS_FILE, output::centers_json(target.centers()).into_bytes()),
    ];
    for (name, bytes) in files {
        let path = dir.join(name);
        output::write_atomic(&path, &bytes).map_err(io_err(&path))?;
    }

    let eval_start = Instant::now();
    let (samples, failed) = evaluate_samples(&ff, &target, exp.train.eval_sample_size, cfg.seed, &exp.eval_solver);
    let report = report_from_samples(&samples, failed);
    let wall_ms = eval_start.elapsed().as_secs_f64() * 1e3;
    print_report(&report);
    write_eval(&dir.join(EVAL_FILE), &report, cfg.seed, cfg.seed, wall_ms, &cfg)
}

pub fn cmd_eval(
    checkpoint_path: &Path,
    config_path: &Path,
    eval_seed: Option<u64>,
    samples_out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(config_path)?;
    let exp = cfg.validate()?;
    let bytes = std::fs::read(checkpoint_path).map_err(io_err(checkpoint_path))?;
    let (header, params) = read_checkpoint(bytes.as_slice()).map_err(|source| CliError::Checkpoint {
        path: checkpoint_path.to_path_buf(),
        source,
    })?;
    let configured = exp.manifold.to_string();
    if header.manifold != configured {
        return Err(CliError::Architecture(format!(
            "checkpoint trained on {}, config names {configured}",
            header.manifold
        )));
    }
    if header.layers != crate::net::architecture_for(&exp.manifold) {
        return Err(CliError::Architecture(format!("layer shapes do not fit {configured}")));
    }
    let ff = FlowField::new(exp.manifold, params).map_err(|e| CliError::Architecture(e.to_string()))?;

    let beside = checkpoint_path.parent().unwrap_or(Path::new(".")).join(CENTERS_FILE);
    let centers = match (&cfg.target_centers, exp.family) {
        (Some(p), _) => Some(load_centers(p, &exp)?),
        (None, TargetFamily::Base | TargetFamily::ConjugationInvariant) => None,
        (None, _) if beside.exists() => Some(load_centers(&beside, &exp)?),
        (None, _) => None,
    };
    let target = build_target(&exp, centers, header.seed)?;
    let seed = eval_seed.unwrap_or(cfg.seed);

    let start = Instant::now();
    let (samples, failed) = evaluate_samples(&ff, &target, exp.train.eval_sample_size, seed, &exp.eval_solver);
    let report = report_from_samples(&samples, failed);
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    print_report(&report);
    if let Some(path) = samples_out {
        let csv = output::samples_csv(&samples, exp.manifold.ambient_dim);
        output::write_atomic(path, csv.as_bytes()).map_err(io_err(path))?;
    }
    write_eval(&cfg.output_dir.join(EVAL_FILE), &report, seed, header.seed, wall_ms, &cfg)
}

fn print_report(r: &EvalReport) {
    eprintln!(
        "KL {:.5} nats  ESS {:.2}%  Z {:.5}  ({} samples, {} failed)",
        r.kl_nats, r.ess_percent, r.z_hat, r.n_samples, r.n_failed
    );
}

pub fn cmd_check() -> Result<(), CliError> {
    let outcomes = run_all(standard_generator, CHECK_SEED);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(CliError::Checks {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(())
}

