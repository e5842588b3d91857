//! File formats written and read by the driver. Every write goes through a
//! temporary file in the destination directory followed by a rename.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::manifolds::{spd_matrix, tri_from_matrix, ManifoldKind, ManifoldSpec, Point};
use crate::densemat::RealMatrix;
use crate::train::{EvalSample, StepLog};

/// Constraint tolerance for centers read from disk.
pub const CENTER_TOL: f64 = 1e-8;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn train_log_csv(rows: &[StepLog]) -> String {
    let mut out = String::from("step,loss,wall_ms,n_ode_steps_mean,n_dropped\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.loss, r.wall_ms, r.n_ode_steps_mean, r.n_dropped);
    }
    out
}

/// Header `x0..x{d-1},log_model,log_target`, one row per sample.
pub fn samples_csv(samples: &[EvalSample], ambient_dim: usize) -> String {
    let mut out = String::new();
    for i in 0..ambient_dim {
        let _ = write!(out, "x{i},");
    }
    out.push_str("log_model,log_target\n");
    for s in samples {
        for c in &s.coords {
            let _ = write!(out, "{c},");
        }
        let _ = writeln!(out, "{},{}", s.log_model, s.log_target);
    }
    out
}

/// Rows of the matrix a point represents. Complex entries become
/// `[re, im]` pairs; a sphere point is a single row.
fn point_rows(spec: &ManifoldSpec, coords: &[f64]) -> Vec<Vec<Value>> {
    let real_rows = |m: &RealMatrix| -> Vec<Vec<Value>> {
        (0..m.rows())
            .map(|r| (0..m.cols()).map(|c| Value::from(m[(r, c)])).collect())
            .collect()
    };
    match spec.kind {
        ManifoldKind::Sphere { .. } | ManifoldKind::Euclidean { .. } => {
            vec![coords.iter().map(|&v| Value::from(v)).collect()]
        }
        ManifoldKind::Unitary { .. } | ManifoldKind::SpecialUnitary { .. } => {
            let m = spec.complex_matrix(coords).expect("complex manifold");
            (0..m.rows())
                .map(|r| {
                    (0..m.cols())
                        .map(|c| {
                            let z = m.get(r, c);
                            Value::from(vec![z.re, z.im])
                        })
                        .collect()
                })
                .collect()
        }
        _ => real_rows(&spec.real_matrix(coords).expect("real matrix manifold")),
    }
}

pub fn centers_json(centers: &[Point]) -> String {
    let list: Vec<Vec<Vec<Value>>> = centers.iter().map(|p| point_rows(&p.spec, &p.coords)).collect();
    let mut text = serde_json::to_string_pretty(&list).expect("plain JSON values");
    text.push('\n');
    text
}

fn entry(v: &Value) -> Result<(f64, f64), String> {
    match v {
        Value::Number(n) => Ok((n.as_f64().ok_or("number out of range")?, 0.0)),
        Value::Array(pair) if pair.len() == 2 => match (pair[0].as_f64(), pair[1].as_f64()) {
            (Some(re), Some(im)) => Ok((re, im)),
            _ => Err("complex entry must be [re, im] numbers".into()),
        },
        _ => Err(format!("bad matrix entry {v}")),
    }
}

/// Expected `(rows, cols)` of one center on `spec`.
fn center_shape(spec: &ManifoldSpec) -> (usize, usize) {
    match spec.kind {
        ManifoldKind::Sphere { .. } | ManifoldKind::Euclidean { .. } => (1, spec.ambient_dim),
        ManifoldKind::Stiefel { m, n } => (n, m),
        _ => (spec.n(), spec.n()),
    }
}

/// Parses a list of row-major matrices into points on `spec`.
pub fn parse_centers(text: &str, spec: &ManifoldSpec) -> Result<Vec<Point>, String> {
    let list: Vec<Vec<Vec<Value>>> =
        serde_json::from_str(text).map_err(|e| format!("expected a list of matrices: {e}"))?;
    let (rows, cols) = center_shape(spec);
    let mut out = Vec::with_capacity(list.len());
    for (index, m) in list.iter().enumerate() {
        let ctx = |msg: String| format!("center {index}: {msg}");
        if m.len() != rows || m.iter().any(|r| r.len() != cols) {
            return Err(ctx(format!("expected a {rows}x{cols} matrix")));
        }
        let mut re = Vec::with_capacity(rows * cols);
        let mut im = Vec::with_capacity(rows * cols);
        for v in m.iter().flatten() {
            let (a, b) = entry(v).map_err(ctx)?;
            re.push(a);
            im.push(b);
        }
        let coords = match spec.kind {
            ManifoldKind::Unitary { .. } | ManifoldKind::SpecialUnitary { .. } => {
                re.extend_from_slice(&im);
                re
            }
            _ if im.iter().any(|&b| b != 0.0) => return Err(ctx("complex entry on a real manifold".into())),
            ManifoldKind::Spd { n, .. } => {
                let q = RealMatrix::from_vec(n, n, re);
                let tri = tri_from_matrix(&q);
                let asym = q.sub(&spd_matrix(n, &tri)).frobenius_norm();
                if asym > CENTER_TOL {
                    return Err(ctx(format!("not symmetric (deviation {asym:e})")));
                }
                tri
            }
            _ => re,
        };
        out.push(Point::new(*spec, coords, CENTER_TOL).map_err(|e| ctx(e.to_string()))?);
    }
    Ok(out)
}
