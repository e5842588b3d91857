//! The coefficient network `f(t, x) → R^{m_gen}` with hand-written
//! forward, forward-mode (JVP), reverse-mode (VJP) and mixed second-order
//! derivatives.
//!
//! Parameters live in one flat vector, layer by layer, each layer as its
//! row-major `outputs × inputs` weight matrix followed by its bias. The
//! gradient type [`ParamGrad`] shares that layout, which keeps the Adam
//! update and the adjoint's parameter channel plain vector arithmetic.

use std::io::{self, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifolds::ManifoldSpec;

/// Hidden width is `HIDDEN_FACTOR · m_gen`.
pub const HIDDEN_FACTOR: usize = 5;
/// Output-layer weights are scaled by this at init so the initial flow is
/// close to the identity.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

const CHECKPOINT_MAGIC: &[u8; 8] = b"MCNFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("layer {layer} takes {got} inputs but the previous layer produces {expected}")]
    LayerMismatch { layer: usize, expected: usize, got: usize },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Identity => a,
        }
    }

    /// σ'(a) expressed through the output y = σ(a).
    #[inline]
    fn deriv(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    /// σ''(a) expressed through y = σ(a).
    #[inline]
    fn second_deriv(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * y * (1.0 - y * y),
            Activation::Identity => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    fn param_count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// `(D+1) → 5m → 5m → m`, tanh hidden, linear output.
pub fn architecture_for(spec: &ManifoldSpec) -> Vec<LayerShape> {
    let (d, m) = (spec.ambient_dim, spec.gen_count);
    let h = HIDDEN_FACTOR * m;
    vec![
        LayerShape { inputs: d + 1, outputs: h, activation: Activation::Tanh },
        LayerShape { inputs: h, outputs: h, activation: Activation::Tanh },
        LayerShape { inputs: h, outputs: m, activation: Activation::Identity },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<LayerShape>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

/// Gradient with the same flat layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad(pub Vec<f64>);

impl ParamGrad {
    pub fn zeros_like(params: &MlpParams) -> Self {
        ParamGrad(vec![0.0; params.n_params()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl MlpParams {
    pub fn new(layers: Vec<LayerShape>, values: Vec<f64>) -> Result<Self, NetError> {
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs != pair[1].inputs {
                return Err(NetError::LayerMismatch {
                    layer: l + 1,
                    expected: pair[0].outputs,
                    got: pair[1].inputs,
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for layer in &layers {
            offsets.push(total);
            total += layer.param_count();
        }
        offsets.push(total);
        if values.len() != total {
            return Err(NetError::ParamCount {
                expected: total,
                got: values.len(),
            });
        }
        Ok(Self { layers, offsets, values })
    }

    pub fn zeros(layers: Vec<LayerShape>) -> Self {
        let total = layers.iter().map(LayerShape::param_count).sum();
        Self::new(layers, vec![0.0; total]).expect("consistent layers")
    }

    /// Glorot-uniform weights, zero biases, output layer scaled by
    /// [`OUTPUT_INIT_SCALE`].
    pub fn init<R: Rng + ?Sized>(spec: &ManifoldSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(architecture_for(spec));
        let last = params.layers.len() - 1;
        for l in 0..params.layers.len() {
            let shape = params.layers[l];
            let bound = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            let scale = if l == last { OUTPUT_INIT_SCALE } else { 1.0 };
            let (w, _) = params.layer_mut(l);
            for v in w.iter_mut() {
                *v = scale * rng.random_range(-bound..=bound);
            }
        }
        params
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// (weights, bias) of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let shape = self.layers[l];
        let start = self.offsets[l];
        let split = start + shape.outputs * shape.inputs;
        (&self.values[start..split], &self.values[split..self.offsets[l + 1]])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let shape = self.layers[l];
        let start = self.offsets[l];
        let wlen = shape.outputs * shape.inputs;
        let (w, b) = self.values[start..self.offsets[l + 1]].split_at_mut(wlen);
        (w, b)
    }

    /// Offset of layer `l` inside the flat parameter vector.
    pub fn layer_offset(&self, l: usize) -> usize {
        self.offsets[l]
    }

    fn input(&self, t: f64, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len() + 1, self.input_dim(), "network input dimension");
        let mut z = Vec::with_capacity(x.len() + 1);
        z.push(t);
        z.extend_from_slice(x);
        z
    }

    /// Forward pass keeping every layer's activations.
    pub fn forward_pass(&self, t: f64, x: &[f64]) -> ForwardPass {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.input(t, x));
        for (l, shape) in self.layers.iter().enumerate() {
            let (w, b) = self.layer(l);
            let prev = &acts[l];
            let out: Vec<f64> = (0..shape.outputs)
                .map(|o| {
                    let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                    shape.activation.apply(b[o] + dot(row, prev))
                })
                .collect();
            acts.push(out);
        }
        ForwardPass { acts }
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.forward_pass(t, x).acts.pop().expect("at least the input layer")
    }

    /// Tangent of every layer along input direction (0, v).
    fn tangents(&self, pass: &ForwardPass, v: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(v.len() + 1, self.input_dim(), "tangent dimension");
        let mut tans = Vec::with_capacity(self.layers.len() + 1);
        let mut dz0 = Vec::with_capacity(v.len() + 1);
        dz0.push(0.0);
        dz0.extend_from_slice(v);
        tans.push(dz0);
        for (l, shape) in self.layers.iter().enumerate() {
            let (w, _) = self.layer(l);
            let prev = &tans[l];
            let y = &pass.acts[l + 1];
            let out: Vec<f64> = (0..shape.outputs)
                .map(|o| {
                    let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                    shape.activation.deriv(y[o]) * dot(row, prev)
                })
                .collect();
            tans.push(out);
        }
        tans
    }

    /// `(f, (∂f/∂x)·v)`; time is not perturbed.
    pub fn jvp(&self, t: f64, x: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let pass = self.forward_pass(t, x);
        let mut tans = self.tangents(&pass, v);
        let df = tans.pop().expect("output tangent");
        (pass.output().to_vec(), df)
    }

    /// Directional derivative reusing a stored forward pass.
    pub fn jvp_cached(&self, pass: &ForwardPass, v: &[f64]) -> Vec<f64> {
        self.tangents(pass, v).pop().expect("output tangent")
    }

    /// Reverse sweep with output cotangent `u`. Adds `scale · (∂f/∂λ)ᵀu` to
    /// `grad_params` (if given) and returns `(∂f/∂(t,x))ᵀu` including the
    /// time component at index 0.
    pub fn vjp_cached(
        &self,
        pass: &ForwardPass,
        u: &[f64],
        mut grad_params: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        assert_eq!(u.len(), self.output_dim(), "cotangent dimension");
        let mut bar = u.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (w, _) = self.layer(l);
            let y = &pass.acts[l + 1];
            let z = &pass.acts[l];
            // adjoint of the pre-activation
            let bar_a: Vec<f64> = (0..shape.outputs).map(|o| bar[o] * shape.activation.deriv(y[o])).collect();
            if let Some((g, scale)) = grad_params.as_mut() {
                let off = self.offsets[l];
                let boff = off + shape.outputs * shape.inputs;
                for o in 0..shape.outputs {
                    let ba = *scale * bar_a[o];
                    if ba == 0.0 {
                        continue;
                    }
                    let grow = &mut g[off + o * shape.inputs..off + (o + 1) * shape.inputs];
                    for (gv, zv) in grow.iter_mut().zip(z) {
                        *gv += ba * zv;
                    }
                    g[boff + o] += ba;
                }
            }
            let mut next = vec![0.0; shape.inputs];
            for o in 0..shape.outputs {
                let ba = bar_a[o];
                if ba == 0.0 {
                    continue;
                }
                let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                for (n, wv) in next.iter_mut().zip(row) {
                    *n += ba * wv;
                }
            }
            bar = next;
        }
        bar
    }

    pub fn vjp(&self, t: f64, x: &[f64], u: &[f64]) -> Vjp {
        let pass = self.forward_pass(t, x);
        let mut grad_params = ParamGrad::zeros_like(self);
        let full = self.vjp_cached(&pass, u, Some((&mut grad_params.0, 1.0)));
        Vjp {
            grad_x: full[1..].to_vec(),
            grad_t: full[0],
            grad_params,
        }
    }

    /// Jacobian ∂f/∂x as `output_dim` rows of length D.
    pub fn jacobian_x(&self, pass: &ForwardPass) -> Vec<Vec<f64>> {
        let m = self.output_dim();
        (0..m)
            .map(|i| {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                let mut row = self.vjp_cached(pass, &e, None);
                row.remove(0);
                row
            })
            .collect()
    }

    /// Gradients of s(x, λ) = ⟨u, (∂f/∂x)·v⟩ with `v`, `u` held fixed.
    /// Adds `scale · ∂s/∂λ` into `grad_params` and returns ∂s/∂x.
    pub fn grad_of_jvp_cached(
        &self,
        pass: &ForwardPass,
        v: &[f64],
        u: &[f64],
        mut grad_params: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        assert_eq!(u.len(), self.output_dim(), "cotangent dimension");
        let tans = self.tangents(pass, v);
        // adjoints of the primal (z) and tangent (dz) activations
        let mut bar_z = vec![0.0; self.output_dim()];
        let mut bar_dz = u.to_vec();
        for l in (0..self.layers.len()).rev() {
            let shape = self.layers[l];
            let (w, _) = self.layer(l);
            let y = &pass.acts[l + 1];
            let z_prev = &pass.acts[l];
            let dz_prev = &tans[l];
            let mut bar_a = vec![0.0; shape.outputs];
            let mut bar_da = vec![0.0; shape.outputs];
            for o in 0..shape.outputs {
                let s1 = shape.activation.deriv(y[o]);
                let s2 = shape.activation.second_deriv(y[o]);
                // dz = σ'(a)·da, with da = W dz_prev
                let da = dot(&w[o * shape.inputs..(o + 1) * shape.inputs], dz_prev);
                bar_da[o] = bar_dz[o] * s1;
                bar_a[o] = bar_dz[o] * da * s2 + bar_z[o] * s1;
            }
            if let Some((g, scale)) = grad_params.as_mut() {
                let off = self.offsets[l];
                let boff = off + shape.outputs * shape.inputs;
                for o in 0..shape.outputs {
                    let (ba, bda) = (*scale * bar_a[o], *scale * bar_da[o]);
                    let grow = &mut g[off + o * shape.inputs..off + (o + 1) * shape.inputs];
                    for k in 0..shape.inputs {
                        grow[k] += ba * z_prev[k] + bda * dz_prev[k];
                    }
                    g[boff + o] += ba;
                }
            }
            let mut next_z = vec![0.0; shape.inputs];
            let mut next_dz = vec![0.0; shape.inputs];
            for o in 0..shape.outputs {
                let row = &w[o * shape.inputs..(o + 1) * shape.inputs];
                for k in 0..shape.inputs {
                    next_z[k] += bar_a[o] * row[k];
                    next_dz[k] += bar_da[o] * row[k];
                }
            }
            bar_z = next_z;
            bar_dz = next_dz;
        }
        bar_z.remove(0);
        bar_z
    }

    pub fn grad_of_jvp(&self, t: f64, x: &[f64], v: &[f64], u: &[f64]) -> (Vec<f64>, ParamGrad) {
        let pass = self.forward_pass(t, x);
        let mut g = ParamGrad::zeros_like(self);
        let gx = self.grad_of_jvp_cached(&pass, v, u, Some((&mut g.0, 1.0)));
        (gx, g)
    }
}

/// Stored activations of one forward evaluation; `acts[0]` is the input
/// `(t, x)` and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    acts: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("nonempty")
    }
}

#[derive(Debug, Clone)]
pub struct Vjp {
    pub grad_x: Vec<f64>,
    pub grad_t: f64,
    pub grad_params: ParamGrad,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Metadata stored in front of the parameter stream of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub manifold: String,
    pub layers: Vec<LayerShape>,
    pub seed: u64,
    pub n_params: usize,
}

/// Layout: 8-byte magic `MCNFCKPT`, u64 LE header length, the header as
/// UTF-8 JSON, then `n_params` little-endian f64 values.
pub fn write_checkpoint<W: Write>(mut w: W, manifold: &str, seed: u64, params: &MlpParams) -> Result<(), NetError> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        manifold: manifold.to_string(),
        layers: params.layers.clone(),
        seed,
        n_params: params.n_params(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(CheckpointHeader, MlpParams), NetError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut values = Vec::with_capacity(header.n_params);
    let mut buf = [0u8; 8];
    for _ in 0..header.n_params {
        r.read_exact(&mut buf)?;
        values.push(f64::from_le_bytes(buf));
    }
    let params = MlpParams::new(header.layers.clone(), values)?;
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(layers: Vec<LayerShape>, scale: f64, rng: &mut impl Rng) -> MlpParams {
        let mut p = MlpParams::zeros(layers);
        for v in p.values_mut() {
            *v = scale * rng.random_range(-1.0..1.0);
        }
        p
    }

    fn small_layers(d: usize, h: usize, m: usize) -> Vec<LayerShape> {
        vec![
            LayerShape { inputs: d + 1, outputs: h, activation: Activation::Tanh },
            LayerShape { inputs: h, outputs: h, activation: Activation::Tanh },
            LayerShape { inputs: h, outputs: m, activation: Activation::Identity },
        ]
    }

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_shapes_and_determinism() {
        let shapes = |spec: ManifoldSpec| -> Vec<(usize, usize)> {
            architecture_for(&spec).iter().map(|l| (l.outputs, l.inputs)).collect()
        };
        assert_eq!(shapes(ManifoldSpec::sphere(2)), vec![(15, 4), (15, 15), (3, 15)]);
        assert_eq!(shapes(ManifoldSpec::so(3)), vec![(15, 10), (15, 15), (3, 15)]);

        let spec = ManifoldSpec::sphere(2);
        let a = MlpParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(4));
        let b = MlpParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.layer(0).1.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_examples() {
        let spec = ManifoldSpec::sphere(2);
        let zero = MlpParams::zeros(architecture_for(&spec));
        assert_eq!(zero.forward(0.3, &[1.0, 0.0, 0.0]), vec![0.0; 3]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::init(&spec, &mut rng);
        for _ in 0..100 {
            let x = spec.sample_base(&mut rng).coords;
            let t = rng.random_range(0.0..1.0);
            let f = p.forward(t, &x);
            assert!(f.iter().all(|v| v.abs() <= 0.5));
            assert_eq!(f, p.forward(t, &x));
        }
    }

    #[test]
    fn jvp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(small_layers(3, 7, 4), 0.8, &mut rng);
        let x = rand_vec(3, &mut rng);
        let (_, df) = p.jvp(0.2, &x, &[0.0; 3]);
        assert_eq!(df, vec![0.0; 4]);

        // single linear layer: df = W (0, v)
        let lin = random_params(
            vec![LayerShape { inputs: 4, outputs: 2, activation: Activation::Identity }],
            1.0,
            &mut rng,
        );
        let v = rand_vec(3, &mut rng);
        let (_, df) = lin.jvp(0.5, &x, &v);
        let (w, _) = lin.layer(0);
        for o in 0..2 {
            let expected: f64 = (0..3).map(|k| w[o * 4 + 1 + k] * v[k]).sum();
            assert!((df[o] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let p = random_params(small_layers(4, 9, 3), 0.7, &mut rng);
            let (x, v) = (rand_vec(4, &mut rng), rand_vec(4, &mut rng));
            let t = rng.random_range(0.0..1.0);
            let (_, df) = p.jvp(t, &x, &v);
            let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let (fp, fm) = (p.forward(t, &xp), p.forward(t, &xm));
            for i in 0..3 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                assert!((fd - df[i]).abs() < 1e-6);
                worst = worst.max((fd - df[i]).abs() / df[i].abs().max(1e-2));
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn vjp_transpose_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = random_params(small_layers(5, 8, 3), 0.9, &mut rng);
            let (x, v, u) = (rand_vec(5, &mut rng), rand_vec(5, &mut rng), rand_vec(3, &mut rng));
            let (_, jv) = p.jvp(0.1, &x, &v);
            let vjp = p.vjp(0.1, &x, &u);
            let lhs = dot(&u, &jv);
            let rhs = dot(&vjp.grad_x, &v);
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
        let p = random_params(small_layers(2, 3, 2), 1.0, &mut rng);
        let vjp = p.vjp(0.0, &[0.3, 0.4], &[0.0, 0.0]);
        assert_eq!(vjp.grad_x, vec![0.0, 0.0]);
        assert_eq!(vjp.grad_t, 0.0);
        assert!(vjp.grad_params.0.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn vjp_time_and_param_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        // two-parameter fixture: one tanh unit feeding one linear unit
        let layers = vec![
            LayerShape { inputs: 2, outputs: 1, activation: Activation::Tanh },
            LayerShape { inputs: 1, outputs: 1, activation: Activation::Identity },
        ];
        let p = MlpParams::new(layers, vec![0.6, -0.8, 0.1, 1.3, 0.2]).unwrap();
        let (x, u, t) = ([0.7], [1.5], 0.4);
        let vjp = p.vjp(t, &x, &u);
        let loss = |q: &MlpParams, t: f64| q.forward(t, &x)[0] * u[0];
        for k in 0..p.n_params() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.values_mut()[k] += h;
            pm.values_mut()[k] -= h;
            let fd = (loss(&pp, t) - loss(&pm, t)) / (2.0 * h);
            assert!((fd - vjp.grad_params.0[k]).abs() < 1e-6, "param {k}");
        }
        let fd_t = (loss(&p, t + h) - loss(&p, t - h)) / (2.0 * h);
        assert!((fd_t - vjp.grad_t).abs() < 1e-6);

        let q = random_params(small_layers(3, 6, 2), 0.8, &mut rng);
        let (x, u) = (rand_vec(3, &mut rng), rand_vec(2, &mut rng));
        let g = q.vjp(0.3, &x, &u).grad_params;
        for k in (0..q.n_params()).step_by(7) {
            let (mut pp, mut pm) = (q.clone(), q.clone());
            pp.values_mut()[k] += h;
            pm.values_mut()[k] -= h;
            let fd = (dot(&pp.forward(0.3, &x), &u) - dot(&pm.forward(0.3, &x), &u)) / (2.0 * h);
            assert!((fd - g.0[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_of_jvp_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_params(small_layers(3, 5, 2), 0.8, &mut rng);
        let (x, v) = (rand_vec(3, &mut rng), rand_vec(3, &mut rng));
        let (gx, gl) = p.grad_of_jvp(0.2, &x, &v, &[0.0, 0.0]);
        assert!(gx.iter().chain(&gl.0).all(|g| *g == 0.0));

        let lin = random_params(
            vec![LayerShape { inputs: 4, outputs: 2, activation: Activation::Identity }],
            1.0,
            &mut rng,
        );
        let (gx, _) = lin.grad_of_jvp(0.2, &x, &v, &[0.3, -0.4]);
        assert!(gx.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn grad_of_jvp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..10 {
            let p = random_params(small_layers(3, 6, 3), 0.9, &mut rng);
            let (x, v, u) = (rand_vec(3, &mut rng), rand_vec(3, &mut rng), rand_vec(3, &mut rng));
            let t = 0.37;
            let s = |q: &MlpParams, x: &[f64]| dot(&u, &q.jvp(t, x, &v).1);
            let (gx, gl) = p.grad_of_jvp(t, &x, &v, &u);
            for k in 0..3 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                let fd = (s(&p, &xp) - s(&p, &xm)) / (2.0 * h);
                assert!((fd - gx[k]).abs() < 1e-5, "x{k}: {fd} vs {}", gx[k]);
            }
            for k in 0..p.n_params() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                pp.values_mut()[k] += h;
                pm.values_mut()[k] -= h;
                let fd = (s(&pp, &x) - s(&pm, &x)) / (2.0 * h);
                assert!((fd - gl.0[k]).abs() < 1e-5, "param {k}: {fd} vs {}", gl.0[k]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ManifoldSpec::so(3);
        let p = MlpParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(12));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "so:3", 12, &p).unwrap();
        let (header, q) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(header.manifold, "so:3");
        assert_eq!(header.seed, 12);
        assert_eq!(q, p);
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(NetError::BadMagic)));
    }
}
