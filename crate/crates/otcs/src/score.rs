//! The conditional score network `s_θ(y; x, t)` and its optimizer state.
//!
//! The trunk maps a D-dimensional state through uniform-width SiLU hidden
//! layers back to D dimensions. A Gaussian-Fourier time embedding and (for
//! conditional models) a condition embedding are added to every hidden
//! activation. Gradients are reverse-mode and exact; sampling uses the EMA
//! shadow parameters while training updates the live ones.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, Activation, FourierFeatures, MlpCache, MlpSpec};
use crate::rng::{self, purpose};
use crate::sde::SdeSpec;

/// Adam plus EMA shadow; see [`nn::AdamState`].
pub type OptimizerState = nn::AdamState;

/// Shape of the score network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreArchitecture {
    pub data_dim: usize,
    /// Width of every hidden layer (trunk and embedding outputs).
    pub hidden: usize,
    /// Number of hidden layers in the trunk.
    pub n_hidden: usize,
    /// Fourier feature dimension for the time embedding (even).
    pub fourier_dim: usize,
    /// Scale of the frozen Fourier frequencies.
    pub fourier_scale: f64,
    pub conditional: bool,
    /// Zero the trunk's output layer so the initial score is identically 0.
    pub zero_init_output: bool,
}

impl ScoreArchitecture {
    /// Toy defaults: trunk D→512→512→D, Fourier dim 256 at scale 16.
    pub fn toy(data_dim: usize, conditional: bool) -> Self {
        ScoreArchitecture {
            data_dim,
            hidden: 512,
            n_hidden: 2,
            fourier_dim: 256,
            fourier_scale: 16.0,
            conditional,
            zero_init_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.data_dim == 0 {
            bad.push("score.data_dim must be >= 1".to_string());
        }
        if self.hidden == 0 {
            bad.push("score.hidden must be >= 1".to_string());
        }
        if self.n_hidden == 0 {
            bad.push("score.n_hidden must be >= 1".to_string());
        }
        if self.fourier_dim == 0 || self.fourier_dim % 2 != 0 {
            bad.push("score.fourier_dim must be a positive even number".to_string());
        }
        if !(self.fourier_scale > 0.0) {
            bad.push("score.fourier_scale must be > 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigValidation { fields: bad })
        }
    }

    fn trunk_spec(&self) -> MlpSpec {
        let mut dims = vec![self.data_dim];
        dims.extend(std::iter::repeat(self.hidden).take(self.n_hidden));
        dims.push(self.data_dim);
        MlpSpec::new(&dims, Activation::Silu)
    }

    fn time_spec(&self) -> MlpSpec {
        MlpSpec::new(&[self.fourier_dim, self.hidden, self.hidden], Activation::Silu)
    }

    fn cond_spec(&self) -> Option<MlpSpec> {
        self.conditional.then(|| {
            MlpSpec::new(
                &[self.data_dim, self.hidden, self.hidden, self.hidden],
                Activation::Silu,
            )
        })
    }
}

/// Parameterized conditional score approximator.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub arch: ScoreArchitecture,
    pub trunk: MlpSpec,
    pub time_mlp: MlpSpec,
    pub cond_mlp: Option<MlpSpec>,
    pub fourier: FourierFeatures,
    /// Flat parameters: `[trunk | time | cond]`.
    pub theta: Vec<f64>,
}

impl ScoreModel {
    pub fn init(arch: ScoreArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let trunk = arch.trunk_spec();
        let time_mlp = arch.time_spec();
        let cond_mlp = arch.cond_spec();
        let mut fr = rng::stream(seed, purpose::SCORE_FOURIER, &[]);
        let fourier = FourierFeatures::new(arch.fourier_dim, arch.fourier_scale, &mut fr);
        let mut ir = rng::stream(seed, purpose::SCORE_INIT, &[]);
        let mut theta = trunk.init_params(&mut ir);
        if arch.zero_init_output {
            let ranges = nn::layer_ranges(&trunk);
            let (wr, br) = ranges.last().unwrap().clone();
            theta[wr].iter_mut().for_each(|w| *w = 0.0);
            theta[br].iter_mut().for_each(|b| *b = 0.0);
        }
        theta.extend(time_mlp.init_params(&mut ir));
        if let Some(spec) = &cond_mlp {
            theta.extend(spec.init_params(&mut ir));
        }
        Ok(ScoreModel { arch, trunk, time_mlp, cond_mlp, fourier, theta })
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    /// Clone with different parameters (used to freeze the EMA shadow).
    pub fn with_params(&self, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), self.theta.len());
        let mut model = self.clone();
        model.theta = params;
        model
    }

    fn param_blocks(&self) -> (usize, usize, usize) {
        let nt = self.trunk.param_count();
        let ne = self.time_mlp.param_count();
        let nc = self.cond_mlp.as_ref().map_or(0, MlpSpec::param_count);
        (nt, ne, nc)
    }

    /// Score estimate for one state. `x` must be present exactly when the
    /// model is conditional.
    pub fn forward(
        &self,
        y: ArrayView1<'_, f64>,
        x: Option<ArrayView1<'_, f64>>,
        t: f64,
    ) -> Result<Array1<f64>> {
        let ys = y.insert_axis(Axis(0)).to_owned();
        let xs = x.map(|x| x.insert_axis(Axis(0)).to_owned());
        let out = self.forward_batch(&ys, xs.as_ref(), &[t])?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }

    /// Batched score evaluation with a per-row time.
    pub fn forward_batch(
        &self,
        ys: &Array2<f64>,
        xs: Option<&Array2<f64>>,
        ts: &[f64],
    ) -> Result<Array2<f64>> {
        let (out, _) = self.forward_batch_cached(ys, xs, ts, false)?;
        Ok(out)
    }

    /// Forward pass retaining everything the backward pass needs.
    pub fn forward_batch_cached(
        &self,
        ys: &Array2<f64>,
        xs: Option<&Array2<f64>>,
        ts: &[f64],
        keep: bool,
    ) -> Result<(Array2<f64>, ScoreCache)> {
        if self.arch.conditional != xs.is_some() {
            return Err(Error::invalid(
                "score.forward",
                if self.arch.conditional {
                    "conditional model called without a condition"
                } else {
                    "unconditional model called with a condition"
                },
            ));
        }
        if ys.ncols() != self.arch.data_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.data_dim, got: ys.ncols() });
        }
        debug_assert_eq!(ys.nrows(), ts.len());
        let (nt, ne, _) = self.param_blocks();
        let p_trunk = &self.theta[..nt];
        let p_time = &self.theta[nt..nt + ne];

        let ff = self.fourier.forward(ts);
        let (temb, time_cache) = nn::mlp_forward_cached(&self.time_mlp, p_time, &ff, keep);
        let mut e = temb;
        let mut cond_cache = None;
        if let (Some(spec), Some(xs)) = (&self.cond_mlp, xs) {
            if xs.ncols() != self.arch.data_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.arch.data_dim,
                    got: xs.ncols(),
                });
            }
            let p_cond = &self.theta[nt + ne..];
            let (cemb, cache) = nn::mlp_forward_cached(spec, p_cond, xs, keep);
            e += &cemb;
            cond_cache = Some(cache);
        }

        // Trunk with the embedding added to every hidden activation.
        let ranges = nn::layer_ranges(&self.trunk);
        let n_layers = self.trunk.layers.len();
        let mut inputs = Vec::new();
        let mut preacts = Vec::new();
        let mut h = ys.clone();
        for (idx, layer) in self.trunk.layers.iter().enumerate() {
            let (wr, br) = &ranges[idx];
            let w =
                ArrayView2::from_shape((layer.out_dim, layer.in_dim), &p_trunk[wr.clone()]).unwrap();
            let b = &p_trunk[br.clone()];
            let mut z = h.dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if keep {
                inputs.push(h);
                preacts.push(z.clone());
            }
            if idx + 1 < n_layers {
                z.mapv_inplace(|v| layer.act.apply(v));
                z += &e;
            }
            h = z;
        }
        let cache =
            ScoreCache { time_cache, cond_cache, trunk_inputs: inputs, trunk_preacts: preacts };
        Ok((h, cache))
    }

    /// Reverse-mode gradients of a scalar loss through the whole network.
    /// `d_out` is ∂loss/∂output; gradients accumulate into `grad` (layout
    /// matching `theta`).
    pub fn backward_batch(&self, cache: &ScoreCache, d_out: &Array2<f64>, grad: &mut [f64]) {
        assert_eq!(grad.len(), self.theta.len());
        let (nt, ne, _) = self.param_blocks();
        let p_trunk = &self.theta[..nt];
        let ranges = nn::layer_ranges(&self.trunk);
        let n_layers = self.trunk.layers.len();
        let n = d_out.nrows();
        let mut d_e = Array2::zeros((n, self.arch.hidden));
        let mut d = d_out.clone();
        for idx in (0..n_layers).rev() {
            let layer = &self.trunk.layers[idx];
            let (wr, br) = &ranges[idx];
            let w =
                ArrayView2::from_shape((layer.out_dim, layer.in_dim), &p_trunk[wr.clone()]).unwrap();
            // Hidden layers carry the embedding injection after the
            // activation: h = act(z) + e.
            let mut dz = d;
            if idx + 1 < n_layers {
                d_e += &dz;
                let z = &cache.trunk_preacts[idx];
                dz.zip_mut_with(z, |dv, zv| *dv *= layer.act.derivative(*zv));
            }
            {
                let input = &cache.trunk_inputs[idx];
                let g = &mut grad[..nt];
                let mut dw = ndarray::ArrayViewMut2::from_shape(
                    (layer.out_dim, layer.in_dim),
                    &mut g[wr.clone()],
                )
                .unwrap();
                ndarray::linalg::general_mat_mul(1.0, &dz.t(), input, 1.0, &mut dw);
                let db = dz.sum_axis(Axis(0));
                for (slot, v) in g[br.clone()].iter_mut().zip(db.iter()) {
                    *slot += v;
                }
            }
            d = dz.dot(&w);
        }
        // Embedding gradients flow into both MLPs.
        let p_time = &self.theta[nt..nt + ne];
        nn::mlp_backward(
            &self.time_mlp,
            p_time,
            &cache.time_cache,
            &d_e,
            Some(&mut grad[nt..nt + ne]),
        );
        if let (Some(spec), Some(cc)) = (&self.cond_mlp, &cache.cond_cache) {
            let p_cond = &self.theta[nt + ne..];
            nn::mlp_backward(spec, p_cond, cc, &d_e, Some(&mut grad[nt + ne..]));
        }
    }

    /// Self-describing checkpoint with live parameters, EMA shadow,
    /// optimizer step count, and the SDE the model was trained against.
    pub fn save(&self, path: &Path, ema: &[f64], step: u64, sde: &SdeSpec) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"OTCSSCR1")?;
        io::write_u32(&mut w, self.arch.data_dim as u32)?;
        io::write_u32(&mut w, self.arch.hidden as u32)?;
        io::write_u32(&mut w, self.arch.n_hidden as u32)?;
        io::write_u32(&mut w, self.arch.fourier_dim as u32)?;
        io::write_f64(&mut w, self.arch.fourier_scale)?;
        io::write_u8(&mut w, self.arch.conditional as u8)?;
        io::write_u8(&mut w, self.arch.zero_init_output as u8)?;
        match sde {
            SdeSpec::Ve { alpha } => {
                io::write_u8(&mut w, 0)?;
                io::write_f64(&mut w, *alpha)?;
                io::write_f64(&mut w, 0.0)?;
            }
            SdeSpec::Vp { beta_min, beta_max } => {
                io::write_u8(&mut w, 1)?;
                io::write_f64(&mut w, *beta_min)?;
                io::write_f64(&mut w, *beta_max)?;
            }
        }
        io::write_u64(&mut w, step)?;
        io::write_f64_slice(&mut w, &self.fourier.freqs)?;
        io::write_f64_slice(&mut w, &self.theta)?;
        io::write_f64_slice(&mut w, ema)?;
        Ok(())
    }

    /// Returns `(model with live params, ema params, step, sde)`.
    pub fn load(path: &Path) -> Result<(Self, Vec<f64>, u64, SdeSpec)> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, b"OTCSSCR1", "score checkpoint")?;
        let data_dim = io::read_u32(&mut r)? as usize;
        let hidden = io::read_u32(&mut r)? as usize;
        let n_hidden = io::read_u32(&mut r)? as usize;
        let fourier_dim = io::read_u32(&mut r)? as usize;
        let fourier_scale = io::read_f64(&mut r)?;
        let conditional = io::read_u8(&mut r)? != 0;
        let zero_init_output = io::read_u8(&mut r)? != 0;
        let sde = match io::read_u8(&mut r)? {
            0 => {
                let alpha = io::read_f64(&mut r)?;
                let _ = io::read_f64(&mut r)?;
                SdeSpec::ve(alpha)?
            }
            1 => {
                let beta_min = io::read_f64(&mut r)?;
                let beta_max = io::read_f64(&mut r)?;
                SdeSpec::vp(beta_min, beta_max)?
            }
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown sde tag {other}")));
            }
        };
        let step = io::read_u64(&mut r)?;
        let freqs = io::read_f64_vec(&mut r)?;
        let theta = io::read_f64_vec(&mut r)?;
        let ema = io::read_f64_vec(&mut r)?;
        let arch = ScoreArchitecture {
            data_dim,
            hidden,
            n_hidden,
            fourier_dim,
            fourier_scale,
            conditional,
            zero_init_output,
        };
        arch.validate()?;
        let trunk = arch.trunk_spec();
        let time_mlp = arch.time_spec();
        let cond_mlp = arch.cond_spec();
        let expected = trunk.param_count()
            + time_mlp.param_count()
            + cond_mlp.as_ref().map_or(0, |s| s.param_count());
        if theta.len() != expected || ema.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "parameter count {} does not match architecture ({expected})",
                theta.len()
            )));
        }
        if freqs.len() * 2 != fourier_dim {
            return Err(Error::CheckpointMismatch("Fourier frequency count mismatch".into()));
        }
        let model = ScoreModel {
            arch,
            trunk,
            time_mlp,
            cond_mlp,
            fourier: FourierFeatures { freqs },
            theta,
        };
        Ok((model, ema, step, sde))
    }
}

/// Intermediates kept by `forward_batch_cached`.
pub struct ScoreCache {
    time_cache: MlpCache,
    cond_cache: Option<MlpCache>,
    trunk_inputs: Vec<Array2<f64>>,
    trunk_preacts: Vec<Array2<f64>>,
}

/// Repeated score evaluations along a trajectory: the condition embedding is
/// fixed for a whole sampling run and the time embedding is shared by every
/// sample within one step, so both are hoisted out of the per-step cost.
pub struct ScoreEvaluator<'a> {
    model: &'a ScoreModel,
    /// `(n, hidden)` condition embedding, zero when unconditional.
    cemb: Array2<f64>,
}

impl<'a> ScoreEvaluator<'a> {
    /// `xs` carries one condition row per trajectory (or None when the model
    /// is unconditional).
    pub fn new(model: &'a ScoreModel, xs: Option<&Array2<f64>>, n: usize) -> Result<Self> {
        if model.arch.conditional != xs.is_some() {
            return Err(Error::invalid(
                "score.evaluator",
                "condition presence must match model.conditional",
            ));
        }
        let (nt, ne, _) = model.param_blocks();
        let cemb = match (&model.cond_mlp, xs) {
            (Some(spec), Some(xs)) => {
                debug_assert_eq!(xs.nrows(), n);
                let p_cond = &model.theta[nt + ne..];
                nn::mlp_forward(spec, p_cond, xs)
            }
            _ => Array2::zeros((n, model.arch.hidden)),
        };
        Ok(ScoreEvaluator { model, cemb })
    }

    /// Evaluate `s(y_i; x_i, t)` for all rows at one shared time.
    pub fn eval(&self, ys: &Array2<f64>, t: f64) -> Array2<f64> {
        let model = self.model;
        let (nt, ne, _) = model.param_blocks();
        let p_trunk = &model.theta[..nt];
        let p_time = &model.theta[nt..nt + ne];
        let ff = model.fourier.forward(&[t]);
        let temb_row = nn::mlp_forward(&model.time_mlp, p_time, &ff);
        let temb = temb_row.index_axis(Axis(0), 0);

        let ranges = nn::layer_ranges(&model.trunk);
        let n_layers = model.trunk.layers.len();
        let mut h = ys.clone();
        for (idx, layer) in model.trunk.layers.iter().enumerate() {
            let (wr, br) = &ranges[idx];
            let w =
                ArrayView2::from_shape((layer.out_dim, layer.in_dim), &p_trunk[wr.clone()]).unwrap();
            let b = &p_trunk[br.clone()];
            let mut z = h.dot(&w.t());
            for mut row in z.rows_mut() {
                for (v, bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if idx + 1 < n_layers {
                z.mapv_inplace(|v| layer.act.apply(v));
                for (mut row, crow) in z.rows_mut().into_iter().zip(self.cemb.rows()) {
                    row += &temb;
                    row += &crow;
                }
            }
            h = z;
        }
        h
    }
}
