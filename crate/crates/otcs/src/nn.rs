//! Minimal dense-network machinery: batched affine layers, smooth
//! activations, Gaussian Fourier features, reverse-mode gradients, and an
//! Adam optimizer with an EMA shadow.
//!
//! Parameters live in one flat `Vec<f64>` per network. The layout is
//! sequential per layer: weights in row-major `(out, in)` order, then the
//! bias. Gradients are accumulated into a flat vector with the same layout,
//! which keeps optimizer updates, checkpointing, and finite-difference
//! probing trivial.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise nonlinearity applied after an affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Silu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            other => Err(Error::invalid("activation", format!("unknown name `{other}`"))),
        }
    }
}

/// One affine layer followed by an activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub act: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// A fully-connected stack. The final layer is linear unless stated otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
}

impl MlpSpec {
    /// Build `dims[0] -> dims[1] -> ... -> dims.last()` with `act` on every
    /// hidden layer and a linear output layer.
    pub fn new(dims: &[usize], act: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                act: if i + 2 == dims.len() { Activation::Identity } else { act },
            })
            .collect();
        MlpSpec { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Draw parameters uniformly from `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            let bound = (1.0 / layer.in_dim as f64).sqrt();
            for _ in 0..layer.param_count() {
                params.push(rng.gen_range(-bound..=bound));
            }
        }
        params
    }
}

/// Offsets of one layer's weight and bias blocks in the flat vector.
pub(crate) fn layer_ranges(spec: &MlpSpec) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let mut offset = 0;
    spec.layers
        .iter()
        .map(|l| {
            let w = offset..offset + l.out_dim * l.in_dim;
            let b = w.end..w.end + l.out_dim;
            offset = b.end;
            (w, b)
        })
        .collect()
}

/// Cached intermediates of one batched forward pass.
///
/// A tanh layer's activation output is the next layer's input, so its
/// derivative comes from `inputs[idx + 1]` for free; only SiLU layers (and a
/// non-identity final layer) need their pre-activations kept.
pub struct MlpCache {
    /// Input to each layer, `(n, in_dim)`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations, kept only where the backward pass needs them;
    /// other slots hold empty arrays.
    preacts: Vec<Array2<f64>>,
}

fn keeps_preact(spec: &MlpSpec, idx: usize) -> bool {
    let layer = &spec.layers[idx];
    match layer.act {
        Activation::Identity => false,
        Activation::Silu => true,
        Activation::Tanh => idx + 1 == spec.layers.len(),
    }
}

/// Batched forward pass: rows of `x` are independent inputs.
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], x: &Array2<f64>) -> Array2<f64> {
    let (out, _) = mlp_forward_cached(spec, params, x, false);
    out
}

/// Forward pass that optionally retains what backward needs.
pub fn mlp_forward_cached(
    spec: &MlpSpec,
    params: &[f64],
    x: &Array2<f64>,
    keep: bool,
) -> (Array2<f64>, MlpCache) {
    debug_assert_eq!(params.len(), spec.param_count());
    debug_assert_eq!(x.ncols(), spec.input_dim());
    let ranges = layer_ranges(spec);
    let mut cache = MlpCache { inputs: Vec::new(), preacts: Vec::new() };
    let mut h = x.clone();
    for (idx, (layer, (wr, br))) in spec.layers.iter().zip(&ranges).enumerate() {
        let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &params[wr.clone()]).unwrap();
        let b = &params[br.clone()];
        let mut z = h.dot(&w.t());
        for mut row in z.rows_mut() {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        if keep {
            cache.inputs.push(h);
            cache.preacts.push(if keeps_preact(spec, idx) { z.clone() } else { Array2::zeros((0, 0)) });
        }
        z.mapv_inplace(|v| layer.act.apply(v));
        h = z;
    }
    (h, cache)
}

/// Reverse-mode pass. `d_out` is the gradient of the loss with respect to the
/// network output. Parameter gradients are accumulated into `grad` (same
/// layout as `params`) when given; the return value is the gradient with
/// respect to the network input.
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &[f64],
    cache: &MlpCache,
    d_out: &Array2<f64>,
    mut grad: Option<&mut [f64]>,
) -> Array2<f64> {
    let ranges = layer_ranges(spec);
    let mut d = d_out.clone();
    for (idx, layer) in spec.layers.iter().enumerate().rev() {
        let (wr, br) = &ranges[idx];
        let w = ArrayView2::from_shape((layer.out_dim, layer.in_dim), &params[wr.clone()]).unwrap();
        // dz = d ⊙ act'(z); tanh reuses the next layer's cached input,
        // which is exactly its activation output.
        let mut dz = d;
        match layer.act {
            Activation::Identity => {}
            Activation::Tanh if idx + 1 < spec.layers.len() => {
                let a = &cache.inputs[idx + 1];
                dz.zip_mut_with(a, |dv, av| *dv *= 1.0 - av * av);
            }
            _ => {
                let z = &cache.preacts[idx];
                dz.zip_mut_with(z, |dv, zv| *dv *= layer.act.derivative(*zv));
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            let input = &cache.inputs[idx];
            {
                let mut dw =
                    ArrayViewMut2::from_shape((layer.out_dim, layer.in_dim), &mut g[wr.clone()])
                        .unwrap();
                general_mat_mul(1.0, &dz.t(), input, 1.0, &mut dw);
            }
            let db = dz.sum_axis(Axis(0));
            for (slot, v) in g[br.clone()].iter_mut().zip(db.iter()) {
                *slot += v;
            }
        }
        d = dz.dot(&w);
    }
    d
}

/// Gradient of a scalar-valued network's output with respect to its input,
/// for a single point.
pub fn mlp_input_gradient(spec: &MlpSpec, params: &[f64], x: &Array1<f64>) -> Array1<f64> {
    debug_assert_eq!(spec.output_dim(), 1);
    let xb = x.view().insert_axis(Axis(0)).to_owned();
    let (_, cache) = mlp_forward_cached(spec, params, &xb, true);
    let d_out = Array2::ones((1, 1));
    let d_in = mlp_backward(spec, params, &cache, &d_out, None);
    d_in.index_axis(Axis(0), 0).to_owned()
}

/// Frozen random Fourier features of a scalar time input.
///
/// `forward` maps `t` to `[sin(2π f_i t), cos(2π f_i t)]` for `dim/2`
/// frequencies drawn once from `N(0, scale²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatures {
    pub freqs: Vec<f64>,
}

impl FourierFeatures {
    pub fn new<R: Rng>(dim: usize, scale: f64, rng: &mut R) -> Self {
        assert!(dim % 2 == 0, "Fourier feature dimension must be even");
        let freqs = (0..dim / 2)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        FourierFeatures { freqs }
    }

    pub fn dim(&self) -> usize {
        self.freqs.len() * 2
    }

    pub fn forward(&self, ts: &[f64]) -> Array2<f64> {
        let half = self.freqs.len();
        let mut out = Array2::zeros((ts.len(), 2 * half));
        for (mut row, &t) in out.rows_mut().into_iter().zip(ts) {
            for (i, &f) in self.freqs.iter().enumerate() {
                let arg = 2.0 * std::f64::consts::PI * f * t;
                row[i] = arg.sin();
                row[half + i] = arg.cos();
            }
        }
        out
    }
}

/// Adam with bias correction plus an exponential-moving-average shadow of
/// the parameters. The shadow starts equal to the initial parameters and is
/// refreshed after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub ema: Vec<f64>,
    pub ema_decay: f64,
}

impl AdamState {
    pub fn new(lr: f64, params: &[f64], ema_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            ema: params.to_vec(),
            ema_decay,
        }
    }

    /// One descent step along `grad`. Fails on a non-finite gradient entry.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], iteration: usize) -> Result<()> {
        assert_eq!(params.len(), grad.len());
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { quantity: "gradient", iteration });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        let d = self.ema_decay;
        for (e, p) in self.ema.iter_mut().zip(params.iter()) {
            *e = d * *e + (1.0 - d) * *p;
        }
        Ok(())
    }
}
