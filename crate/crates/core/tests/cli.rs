//! End-to-end runs of the `mcnf` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mcnf::cli::output::parse_centers;
use mcnf::manifolds::ManifoldSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn mcnf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcnf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let out = dir.join(format!("{name}_out"));
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, format!("{body}\noutput_dir = {:?}\n", out.to_str().unwrap())).unwrap();
    path
}

fn out_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().unwrap().to_str().unwrap();
    config.with_file_name(format!("{stem}_out"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn without_wall_clock(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_ms");
    v
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
}

const SMALL_SPHERE: &str = "manifold = \"sphere:2\"\ntarget_family = \"vmf\"\ntarget_beta = 10.0\n\
                            target_k = 4\nseed = 1\nn_steps = 3\nbatch_size = 16\neval_sample_size = 300";

#[test]
fn train_writes_the_file_contract() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", SMALL_SPHERE);
    ok(&mcnf(&["train", cfg.to_str().unwrap()]));
    let out = out_dir(&cfg);
    for f in ["checkpoint.bin", "train_log.csv", "eval.json", "centers.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,wall_ms,n_ode_steps_mean,n_dropped");
    assert_eq!(lines.count(), 3);
    let eval = read_json(&out.join("eval.json"));
    for key in ["kl_nats", "ess_percent", "z_hat", "n_samples"] {
        assert!(eval[key].is_number(), "eval.json lacks {key}");
    }
    assert_eq!(eval["n_samples"], 300);
    assert_eq!(eval["config"]["manifold"], "sphere:2");
    let centers = parse_centers(
        &std::fs::read_to_string(out.join("centers.json")).unwrap(),
        &ManifoldSpec::sphere(2),
    )
    .unwrap();
    assert_eq!(centers.len(), 4);
    // no temporary files left behind by the atomic writes
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 4);
}

#[test]
fn same_config_gives_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a", SMALL_SPHERE);
    let b = write_config(dir.path(), "b", SMALL_SPHERE);
    ok(&mcnf(&["train", a.to_str().unwrap()]));
    ok(&mcnf(&["train", b.to_str().unwrap()]));
    let (oa, ob) = (out_dir(&a), out_dir(&b));
    let mut ea = without_wall_clock(read_json(&oa.join("eval.json")));
    let mut eb = without_wall_clock(read_json(&ob.join("eval.json")));
    ea["config"]["output_dir"] = Value::Null;
    eb["config"]["output_dir"] = Value::Null;
    assert_eq!(ea, eb);
    for f in ["checkpoint.bin", "centers.json"] {
        assert_eq!(std::fs::read(oa.join(f)).unwrap(), std::fs::read(ob.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", SMALL_SPHERE);
    ok(&mcnf(&["--seed", "9", "train", cfg.to_str().unwrap()]));
    let eval = read_json(&out_dir(&cfg).join("eval.json"));
    assert_eq!(eval["config"]["seed"], 9);
    assert_eq!(eval["checkpoint_seed"], 9);
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", &format!("{SMALL_SPHERE}\nlearning_rate = 0.1"));
    let o = mcnf(&["train", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert!(!out_dir(&cfg).exists(), "nothing computed before validation");
}

#[test]
fn invalid_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", &SMALL_SPHERE.replace("batch_size = 16", "batch_size = 0"));
    let o = mcnf(&["train", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("`batch_size`"));
}

#[test]
fn zero_step_identity_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let s = 4000;
    let cfg = write_config(
        dir.path(),
        "id",
        &format!("manifold = \"so:3\"\ntarget_family = \"base\"\nn_steps = 0\neval_sample_size = {s}\nseed = 4"),
    );
    ok(&mcnf(&["train", cfg.to_str().unwrap()]));
    let out = out_dir(&cfg);
    let eval = read_json(&out.join("eval.json"));
    let kl = eval["kl_nats"].as_f64().unwrap();
    let ess = eval["ess_percent"].as_f64().unwrap();
    assert!(kl.abs() <= 3.0 / (s as f64).sqrt(), "KL {kl}");
    assert!(ess >= 99.9, "ESS {ess}");

    let samples = dir.path().join("samples.csv");
    ok(&mcnf(&[
        "--samples-out",
        samples.to_str().unwrap(),
        "eval",
        out.join("checkpoint.bin").to_str().unwrap(),
        cfg.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(&samples).unwrap();
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 9 + 2);
    assert_eq!(&header[9..], ["log_model", "log_target"]);
    let rows: Vec<Vec<f64>> = rows.map(|r| r.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), s);
    assert!(rows.iter().all(|r| r.len() == 11));
    let again = read_json(&out.join("eval.json"));
    assert!(again["kl_nats"].as_f64().unwrap().abs() <= 3.0 / (s as f64).sqrt());
}

#[test]
fn eval_reproduces_training_report_and_reads_saved_centers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", SMALL_SPHERE);
    ok(&mcnf(&["train", cfg.to_str().unwrap()]));
    let out = out_dir(&cfg);
    let trained = without_wall_clock(read_json(&out.join("eval.json")));
    ok(&mcnf(&["eval", out.join("checkpoint.bin").to_str().unwrap(), cfg.to_str().unwrap()]));
    let evaluated = without_wall_clock(read_json(&out.join("eval.json")));
    assert_eq!(trained, evaluated);

    // centers.json beside the checkpoint wins over the checkpoint seed
    let moved = dir.path().join("moved");
    std::fs::create_dir(&moved).unwrap();
    std::fs::copy(out.join("checkpoint.bin"), moved.join("checkpoint.bin")).unwrap();
    let mut centers: Value = read_json(&out.join("centers.json"));
    centers.as_array_mut().unwrap().truncate(1);
    std::fs::write(moved.join("centers.json"), centers.to_string()).unwrap();
    ok(&mcnf(&["eval", moved.join("checkpoint.bin").to_str().unwrap(), cfg.to_str().unwrap()]));
    let one_center = read_json(&out.join("eval.json"));
    assert_ne!(one_center["kl_nats"], trained["kl_nats"]);
}

/// `mean(-log w) + log mean(w)`, written out independently of the library.
fn kl_estimate(log_w: &[f64]) -> f64 {
    let n = log_w.len() as f64;
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_mean_w = max + (log_w.iter().map(|l| (l - max).exp()).sum::<f64>() / n).ln();
    -log_w.iter().sum::<f64>() / n + log_mean_w
}

fn bootstrap_se(log_w: &[f64], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps: Vec<f64> = (0..200)
        .map(|_| {
            let resample: Vec<f64> = (0..log_w.len()).map(|_| log_w[rng.random_range(0..log_w.len())]).collect();
            kl_estimate(&resample)
        })
        .collect();
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    (reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64).sqrt()
}

#[test]
fn eval_seed_changes_kl_within_monte_carlo_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run",
        &SMALL_SPHERE.replace("n_steps = 3", "n_steps = 20").replace("eval_sample_size = 300", "eval_sample_size = 4000"),
    );
    ok(&mcnf(&["train", cfg.to_str().unwrap()]));
    let out = out_dir(&cfg);
    let ckpt = out.join("checkpoint.bin");
    let samples = dir.path().join("s.csv");
    let mut kls = Vec::new();
    let mut spread = 0.0f64;
    for seed in 100..105u64 {
        ok(&mcnf(&[
            "--seed",
            &seed.to_string(),
            "--samples-out",
            samples.to_str().unwrap(),
            "eval",
            ckpt.to_str().unwrap(),
            cfg.to_str().unwrap(),
        ]));
        let eval = read_json(&out.join("eval.json"));
        assert_eq!(eval["eval_seed"], seed);
        kls.push(eval["kl_nats"].as_f64().unwrap());
        let csv = std::fs::read_to_string(&samples).unwrap();
        let log_w: Vec<f64> = csv
            .lines()
            .skip(1)
            .map(|r| {
                let c: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
                c[c.len() - 1] - c[c.len() - 2]
            })
            .collect();
        assert!((kl_estimate(&log_w) - kls[kls.len() - 1]).abs() < 1e-9);
        spread = spread.max(bootstrap_se(&log_w, seed));
    }
    let lo = kls.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = kls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(hi > lo, "eval seed had no effect");
    // two independent estimates differ by at most 3 sqrt(2) bootstrap standard errors
    assert!(hi - lo <= 3.0 * 2f64.sqrt() * spread, "KL spread {} vs se {spread}: {kls:?}", hi - lo);
}

#[test]
fn eval_rejects_mismatched_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run", SMALL_SPHERE);
    ok(&mcnf(&["train", cfg.to_str().unwrap()]));
    let other = write_config(dir.path(), "other", "manifold = \"so:3\"\neval_sample_size = 10");
    let o = mcnf(&[
        "eval",
        out_dir(&cfg).join("checkpoint.bin").to_str().unwrap(),
        other.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("architecture mismatch"));
}

#[test]
fn explicit_centers_file_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let centers = dir.path().join("centers.json");
    std::fs::write(&centers, "[[[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]]]").unwrap();
    let body = format!(
        "{}\ntarget_centers = {:?}",
        SMALL_SPHERE.replace("target_k = 4", "target_k = 2"),
        centers.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), "run", &body);
    ok(&mcnf(&["train", cfg.to_str().unwrap()]));
    let saved = read_json(&out_dir(&cfg).join("centers.json"));
    assert_eq!(saved, serde_json::json!([[[0.0, 0.0, 1.0]], [[0.0, 0.0, -1.0]]]));

    std::fs::write(&centers, "[[[0.0, 0.0, 2.0]]]").unwrap();
    let o = mcnf(&["train", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("center 0"));
}

#[test]
fn check_subcommand_passes() {
    let o = mcnf(&["check"]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().count() >= 10);
    assert!(stdout.lines().all(|l| l.starts_with("[PASS]")), "{stdout}");
}
