//! Training the conditional score model against an estimated coupling:
//! compatibility tables, resampling-by-compatibility, the fitting-noise
//! loss, and the discrete/continuous training loops. Plain unconditional
//! denoising score matching lives here too, for the guided baseline.
//!
//! Per training pair `(x, y)` the loss is
//!
//! ```text
//! (w_t/σ_t²) ‖ s_θ(u_t(y) + σ_t ε; x, t) σ_t + ε ‖²
//! ```
//!
//! i.e. the model fits the scaled noise. Targets are chosen per source with
//! probability proportional to `H(x, ·)`, either from a precomputed table
//! (finite datasets) or from fresh candidate draws (continuous
//! distributions).
//!
//! Every batch slot draws from rng streams derived from
//! `(seed, purpose, iteration, slot)`. Slots are therefore order-independent,
//! skipped slots do not shift anyone else's draws, and a paired dataset
//! encoded as a one-candidate table reproduces the paired loss bit for bit.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::PointSampler;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::AdamState;
use crate::ot::EmpiricalMeasure;
use crate::potentials::PotentialPair;
use crate::rng::{self, purpose};
use crate::score::ScoreModel;
use crate::sde::{SdeSpec, HORIZON, T_MIN};

/// Default compatibility cutoff when building tables. Dual training leaves
/// tiny positive residues, so a strict `> 0` would keep spurious candidates.
pub const DEFAULT_H_THRESHOLD: f64 = 0.001;

/// Time weighting `w_t` of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `w_t = σ_t²` — cancels the noise scaling entirely.
    SigmaSquared,
    /// `w_t = g(t)²` — the bound-consistent variant.
    DiffusionSquared,
}

impl WeightMode {
    pub fn name(self) -> &'static str {
        match self {
            WeightMode::SigmaSquared => "sigma_squared",
            WeightMode::DiffusionSquared => "diffusion_squared",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sigma_squared" => Ok(WeightMode::SigmaSquared),
            "diffusion_squared" => Ok(WeightMode::DiffusionSquared),
            other => Err(Error::invalid("score.weight_mode", format!("unknown mode `{other}`"))),
        }
    }

    /// Multiplier `w_t/σ_t²` in front of the fitting-noise residual.
    fn factor(self, sde: &SdeSpec, t: f64) -> f64 {
        match self {
            WeightMode::SigmaSquared => 1.0,
            WeightMode::DiffusionSquared => {
                let g = sde.diffusion(t);
                g * g / sde.kernel_variance(t)
            }
        }
    }
}

/// Per-source candidate targets with `H` above the threshold, weights
/// normalized to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct HTable {
    pub threshold: f64,
    pub candidates: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
    /// Sources whose candidate set came up empty; they are excluded from
    /// training batches.
    pub skipped: Vec<usize>,
}

impl HTable {
    /// Precompute candidates and weights for every source. Errors if every
    /// source ends up empty (untrained potentials or a threshold set too
    /// high).
    pub fn build(
        pp: &PotentialPair,
        p: &EmpiricalMeasure,
        q: &EmpiricalMeasure,
        threshold: f64,
    ) -> Result<Self> {
        let h = pp.compatibility_matrix(p.coords_view(), q.coords_view())?;
        let mut candidates = Vec::with_capacity(p.len());
        let mut weights = Vec::with_capacity(p.len());
        let mut skipped = Vec::new();
        for i in 0..p.len() {
            let mut idx = Vec::new();
            let mut w = Vec::new();
            for j in 0..q.len() {
                if h[[i, j]] > threshold {
                    idx.push(j);
                    w.push(h[[i, j]]);
                }
            }
            let total: f64 = w.iter().sum();
            if idx.is_empty() {
                skipped.push(i);
            } else {
                w.iter_mut().for_each(|v| *v /= total);
            }
            candidates.push(idx);
            weights.push(w);
        }
        if skipped.len() == p.len() {
            return Err(Error::EmptyTable(format!(
                "no source has a candidate with H > {threshold}; potentials look untrained or the threshold is too high"
            )));
        }
        Ok(HTable { threshold, candidates, weights, skipped })
    }

    /// Build from explicit candidate lists and raw (unnormalized) H values.
    /// Paired datasets are encoded this way, one candidate per source.
    pub fn from_raw(threshold: f64, candidates: Vec<Vec<usize>>, raw_h: Vec<Vec<f64>>) -> Self {
        let mut weights = raw_h;
        let mut skipped = Vec::new();
        for (i, w) in weights.iter_mut().enumerate() {
            let total: f64 = w.iter().sum();
            if w.is_empty() || total <= 0.0 {
                skipped.push(i);
                w.clear();
            } else {
                w.iter_mut().for_each(|v| *v /= total);
            }
        }
        HTable { threshold, candidates, weights, skipped }
    }

    pub fn n_sources(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self, i: usize) -> bool {
        self.candidates[i].is_empty()
    }

    /// Draw a candidate index for source `i` with probability proportional
    /// to its stored compatibility.
    pub fn resample<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Result<usize> {
        if self.is_empty(i) {
            return Err(Error::ZeroMass(format!("source {i} has no candidates")));
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let w = &self.weights[i];
        for (slot, j) in self.candidates[i].iter().enumerate() {
            acc += w[slot];
            if u < acc {
                return Ok(*j);
            }
        }
        Ok(*self.candidates[i].last().unwrap())
    }

    /// Compact binary: per source, candidate indices plus weights.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(b"OTCSHTB1")?;
        io::write_f64(&mut w, self.threshold)?;
        io::write_u64(&mut w, self.candidates.len() as u64)?;
        for (idx, ws) in self.candidates.iter().zip(&self.weights) {
            io::write_u64(&mut w, idx.len() as u64)?;
            for j in idx {
                io::write_u32(&mut w, *j as u32)?;
            }
            for v in ws {
                io::write_f64(&mut w, *v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, b"OTCSHTB1", "compatibility table")?;
        let threshold = io::read_f64(&mut r)?;
        let n = io::read_u64(&mut r)? as usize;
        let mut candidates = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        let mut skipped = Vec::new();
        for i in 0..n {
            let k = io::read_u64(&mut r)? as usize;
            let mut idx = Vec::with_capacity(k);
            for _ in 0..k {
                idx.push(io::read_u32(&mut r)? as usize);
            }
            let mut ws = Vec::with_capacity(k);
            for _ in 0..k {
                ws.push(io::read_f64(&mut r)?);
            }
            if idx.is_empty() {
                skipped.push(i);
            }
            candidates.push(idx);
            weights.push(ws);
        }
        Ok(HTable { threshold, candidates, weights, skipped })
    }
}

/// Draw `l` fresh candidates from `q`, keep one with probability
/// proportional to `H(x, ·)`. Redraws up to `retry_cap` times when every
/// candidate has zero compatibility; `None` means the source was skipped.
pub fn resample_continuous(
    pp: &PotentialPair,
    x: ArrayView1<'_, f64>,
    q: &dyn PointSampler,
    l: usize,
    retry_cap: usize,
    rng: &mut dyn rand::RngCore,
) -> Result<Option<Array1<f64>>> {
    if l == 0 {
        return Err(Error::invalid("score.candidate_count", "L must be >= 1"));
    }
    for _ in 0..retry_cap.max(1) {
        let ys = q.sample_batch(&mut *rng, l);
        let h = pp.compatibility_against(x, ys.view())?;
        let total: f64 = h.sum();
        if total <= 0.0 {
            continue;
        }
        let u: f64 = (&mut *rng).gen();
        let mut acc = 0.0;
        for (j, hj) in h.iter().enumerate() {
            acc += hj / total;
            if u < acc {
                return Ok(Some(ys.row(j).to_owned()));
            }
        }
        return Ok(Some(ys.row(l - 1).to_owned()));
    }
    Ok(None)
}

/// Hyperparameters of the score-training loops.
#[derive(Debug, Clone)]
pub struct CdsmTrainConfig {
    pub batch_size: usize,
    /// Candidate draws per source in the continuous path (`L`).
    pub candidate_count: usize,
    pub n_iter: usize,
    pub learning_rate: f64,
    pub weight_mode: WeightMode,
    pub seed: u64,
    pub log_every: usize,
    /// Candidate redraw attempts before a continuous source is skipped.
    pub retry_cap: usize,
}

impl Default for CdsmTrainConfig {
    fn default() -> Self {
        let batch_size = 32;
        CdsmTrainConfig {
            batch_size,
            candidate_count: 10 * batch_size,
            n_iter: 2000,
            learning_rate: 1e-4,
            weight_mode: WeightMode::SigmaSquared,
            seed: 0,
            log_every: 100,
            retry_cap: 8,
        }
    }
}

impl CdsmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("score.batch_size must be >= 1".to_string());
        }
        if self.candidate_count == 0 {
            bad.push("score.candidate_count must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            bad.push("score.lr must be > 0".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigValidation { fields: bad })
        }
    }
}

/// Fitting-noise loss for one pair. `x` must match `model.conditional`.
pub fn cdsm_loss(
    model: &ScoreModel,
    sde: &SdeSpec,
    x: Option<ArrayView1<'_, f64>>,
    y: ArrayView1<'_, f64>,
    t: f64,
    noise: ArrayView1<'_, f64>,
    weight_mode: WeightMode,
) -> Result<f64> {
    let ys = y.insert_axis(Axis(0)).to_owned();
    let xs = x.map(|v| v.insert_axis(Axis(0)).to_owned());
    let noises = noise.insert_axis(Axis(0)).to_owned();
    batch_loss_grad(model, sde, xs.as_ref(), &ys, &[t], &noises, weight_mode, None)
}

/// The classic paired loss: the condition is looked up through the
/// source-per-target map instead of being resampled. Under a hard coupling
/// this coincides with `cdsm_loss` on the same pair.
#[allow(clippy::too_many_arguments)]
pub fn paired_dsm_loss(
    model: &ScoreModel,
    sde: &SdeSpec,
    x_cond_of_target: &[usize],
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    target_index: usize,
    t: f64,
    noise: ArrayView1<'_, f64>,
    weight_mode: WeightMode,
) -> Result<f64> {
    let xi = *x_cond_of_target
        .get(target_index)
        .ok_or_else(|| Error::invalid("pairing", "target index out of range"))?;
    cdsm_loss(model, sde, Some(p.point(xi)), q.point(target_index), t, noise, weight_mode)
}

/// Mean fitting-noise loss over a batch; accumulates ∂loss/∂θ into `grad`
/// when given.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_grad(
    model: &ScoreModel,
    sde: &SdeSpec,
    xs: Option<&Array2<f64>>,
    ys: &Array2<f64>,
    ts: &[f64],
    noises: &Array2<f64>,
    weight_mode: WeightMode,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let b = ys.nrows();
    let d = ys.ncols();
    debug_assert_eq!(ts.len(), b);
    let mut yt = Array2::zeros((b, d));
    let mut sigmas = vec![0.0; b];
    for r in 0..b {
        let ms = sde.mean_scale(ts[r]);
        let sigma = sde.sigma(ts[r]);
        sigmas[r] = sigma;
        for c in 0..d {
            yt[[r, c]] = ms * ys[[r, c]] + sigma * noises[[r, c]];
        }
    }
    let want_grad = grad.is_some();
    let (s, cache) = model.forward_batch_cached(&yt, xs, ts, want_grad)?;
    let mut loss = 0.0;
    let mut d_out = Array2::zeros((b, d));
    for r in 0..b {
        let sigma = sigmas[r];
        let w = weight_mode.factor(sde, ts[r]);
        let mut sq = 0.0;
        for c in 0..d {
            let resid = s[[r, c]] * sigma + noises[[r, c]];
            sq += resid * resid;
            d_out[[r, c]] = w * 2.0 * resid * sigma / b as f64;
        }
        loss += w * sq;
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { quantity: "cdsm loss", iteration: 0 });
    }
    if let Some(g) = grad {
        model.backward_batch(&cache, &d_out, g);
    }
    Ok(loss)
}

/// How training gets its `(x, y)` pairs.
pub enum CouplingSource<'a> {
    /// Finite datasets with a precomputed compatibility table.
    Discrete { p: &'a EmpiricalMeasure, q: &'a EmpiricalMeasure, table: &'a HTable },
    /// Finite paired datasets: each source index maps to its target index.
    Paired { p: &'a EmpiricalMeasure, q: &'a EmpiricalMeasure, target_of_source: &'a [usize] },
    /// Continuous distributions with fresh candidate draws per source.
    Continuous {
        pp: &'a PotentialPair,
        p: &'a dyn PointSampler,
        q: &'a dyn PointSampler,
        candidate_count: usize,
        retry_cap: usize,
    },
    /// No conditioning: draw targets directly (unconditional DSM).
    TargetOnly { q: &'a dyn PointSampler },
}

/// Diagnostics from a training run.
#[derive(Debug, Clone, Default)]
pub struct ScoreTrainLog {
    /// `(iteration, batch loss)` rows.
    pub losses: Vec<(usize, f64)>,
    /// Continuous sources dropped after exhausting the retry cap.
    pub skipped_sources: u64,
}

/// A trained model: live parameters plus the optimizer whose EMA shadow is
/// what sampling should use.
#[derive(Debug, Clone)]
pub struct TrainedScore {
    pub model: ScoreModel,
    pub opt: AdamState,
    pub log: ScoreTrainLog,
}

impl TrainedScore {
    /// The frozen model carrying EMA parameters.
    pub fn ema_model(&self) -> ScoreModel {
        self.model.with_params(self.opt.ema.clone())
    }
}

/// One assembled batch; rows remember which slot produced them so times and
/// noises stay tied to the slot's derived streams.
struct Batch {
    xs: Option<Array2<f64>>,
    ys: Array2<f64>,
    ts: Vec<f64>,
    noises: Array2<f64>,
    skipped: u64,
}

fn assemble_batch(
    coupling: &CouplingSource<'_>,
    conditional: bool,
    dim: usize,
    iter: u64,
    cfg: &CdsmTrainConfig,
) -> Result<Batch> {
    let b = cfg.batch_size;
    // (slot, condition, target)
    let mut rows: Vec<(u64, Option<Array1<f64>>, Array1<f64>)> = Vec::with_capacity(b);
    let mut skipped = 0u64;
    for slot in 0..b as u64 {
        let mut r_src = rng::stream(cfg.seed, purpose::SCORE_BATCH, &[iter, slot]);
        let mut r_sel = rng::stream(cfg.seed, purpose::SCORE_RESAMPLE, &[iter, slot]);
        match coupling {
            CouplingSource::Discrete { p, q, table } => {
                let mut i = p.sample_index(&mut r_src);
                let mut tries = 0;
                while table.is_empty(i) {
                    i = p.sample_index(&mut r_src);
                    tries += 1;
                    if tries > 100_000 {
                        return Err(Error::EmptyTable(
                            "could not draw a source with candidates".into(),
                        ));
                    }
                }
                let j = table.resample(i, &mut r_sel)?;
                rows.push((slot, Some(p.point(i).to_owned()), q.point(j).to_owned()));
            }
            CouplingSource::Paired { p, q, target_of_source } => {
                let i = p.sample_index(&mut r_src);
                let j = target_of_source[i];
                rows.push((slot, Some(p.point(i).to_owned()), q.point(j).to_owned()));
            }
            CouplingSource::Continuous { pp, p, q, candidate_count, retry_cap } => {
                let x = p.sample_batch(&mut r_src, 1).row(0).to_owned();
                match resample_continuous(pp, x.view(), *q, *candidate_count, *retry_cap, &mut r_sel)?
                {
                    Some(y) => rows.push((slot, Some(x), y)),
                    None => skipped += 1,
                }
            }
            CouplingSource::TargetOnly { q } => {
                let y = q.sample_batch(&mut r_src, 1).row(0).to_owned();
                rows.push((slot, None, y));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyTable(format!(
            "every source in the batch at iteration {iter} exhausted the retry cap"
        )));
    }
    let n = rows.len();
    let mut xs = Array2::zeros((n, dim));
    let mut ys = Array2::zeros((n, dim));
    let mut ts = Vec::with_capacity(n);
    let mut noises = Array2::zeros((n, dim));
    for (row, (slot, x, y)) in rows.into_iter().enumerate() {
        if let Some(x) = x {
            xs.row_mut(row).assign(&x);
        }
        ys.row_mut(row).assign(&y);
        let mut r_t = rng::stream(cfg.seed, purpose::SCORE_TIME, &[iter, slot]);
        let u: f64 = r_t.gen();
        ts.push(T_MIN + (HORIZON - T_MIN) * u);
        let mut r_n = rng::stream(cfg.seed, purpose::SCORE_NOISE, &[iter, slot]);
        for c in 0..dim {
            noises[[row, c]] = StandardNormal.sample(&mut r_n);
        }
    }
    Ok(Batch { xs: conditional.then_some(xs), ys, ts, noises, skipped })
}

/// Train a conditional model against a coupling. One target is resampled per
/// source per iteration; Adam updates the live parameters and the EMA shadow
/// follows.
pub fn train_conditional(
    model: ScoreModel,
    sde: &SdeSpec,
    coupling: &CouplingSource<'_>,
    cfg: &CdsmTrainConfig,
) -> Result<TrainedScore> {
    if !model.arch.conditional {
        return Err(Error::invalid(
            "score.conditional",
            "train_conditional needs a conditional model",
        ));
    }
    if matches!(coupling, CouplingSource::TargetOnly { .. }) {
        return Err(Error::invalid("coupling", "conditional training needs a coupling"));
    }
    train_loop(model, sde, coupling, cfg)
}

/// Standard denoising score matching on the target distribution alone.
pub fn train_unconditional(
    model: ScoreModel,
    sde: &SdeSpec,
    q: &dyn PointSampler,
    cfg: &CdsmTrainConfig,
) -> Result<TrainedScore> {
    if model.arch.conditional {
        return Err(Error::invalid(
            "score.conditional",
            "train_unconditional needs an unconditional model",
        ));
    }
    train_loop(model, sde, &CouplingSource::TargetOnly { q }, cfg)
}

fn train_loop(
    mut model: ScoreModel,
    sde: &SdeSpec,
    coupling: &CouplingSource<'_>,
    cfg: &CdsmTrainConfig,
) -> Result<TrainedScore> {
    cfg.validate()?;
    let dim = model.arch.data_dim;
    let conditional = model.arch.conditional;
    let mut opt = AdamState::new(cfg.learning_rate, &model.theta, 0.999);
    let mut log = ScoreTrainLog::default();
    let mut grad = vec![0.0; model.theta.len()];
    for iter in 0..cfg.n_iter {
        let batch = assemble_batch(coupling, conditional, dim, iter as u64, cfg)?;
        log.skipped_sources += batch.skipped;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let loss = batch_loss_grad(
            &model,
            sde,
            batch.xs.as_ref(),
            &batch.ys,
            &batch.ts,
            &batch.noises,
            cfg.weight_mode,
            Some(&mut grad),
        )
        .map_err(|e| match e {
            Error::NonFinite { quantity, .. } => Error::NonFinite { quantity, iteration: iter },
            other => other,
        })?;
        opt.step(&mut model.theta, &grad, iter)?;
        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.n_iter) {
            log.losses.push((iter, loss));
        }
    }
    Ok(TrainedScore { model, opt, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::ot::{CostKind, OtProblem};
    use crate::score::ScoreArchitecture;
    use ndarray::{arr1, arr2};

    fn small_model(conditional: bool, zero_out: bool, seed: u64) -> ScoreModel {
        ScoreModel::init(
            ScoreArchitecture {
                data_dim: 1,
                hidden: 24,
                n_hidden: 2,
                fourier_dim: 8,
                fourier_scale: 4.0,
                conditional,
                zero_init_output: zero_out,
            },
            seed,
        )
        .unwrap()
    }

    fn one_pair_potentials() -> PotentialPair {
        // Unit-cost pair with u+v lifted so H > 0 on nearby points.
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.25).unwrap();
        let mut pp = PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 0);
        let nu = pp.u_spec.param_count();
        pp.omega[nu - 1] += 3.0;
        pp
    }

    #[test]
    fn table_weights_normalize_and_skip_empty() {
        let pp = one_pair_potentials();
        let p = EmpiricalMeasure::uniform(arr2(&[[0.0], [50.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[0.5], [1.0], [60.0]])).unwrap();
        // Source 50 is far from every target (cost dwarfs u+v), so its row is
        // empty; source 0 keeps the two nearby targets.
        let table = HTable::build(&pp, &p, &q, DEFAULT_H_THRESHOLD).unwrap();
        assert_eq!(table.skipped, vec![1]);
        assert_eq!(table.candidates[0], vec![0, 1]);
        let sum: f64 = table.weights[0].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_potentials_abort_table_build() {
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.25).unwrap();
        let mut pp = PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 0);
        pp.omega.iter_mut().for_each(|w| *w = 0.0);
        let p = EmpiricalMeasure::uniform(arr2(&[[0.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[1.0]])).unwrap();
        let err = HTable::build(&pp, &p, &q, DEFAULT_H_THRESHOLD).unwrap_err();
        assert!(matches!(err, Error::EmptyTable(_)));
    }

    #[test]
    fn resample_frequencies_match_weights() {
        // Raw H values (1, 1, 2) select with probabilities (0.25, 0.25, 0.5).
        let table = HTable::from_raw(0.0, vec![vec![0, 1, 2]], vec![vec![1.0, 1.0, 2.0]]);
        let mut r = rng::stream(5, "test/resample", &[]);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[table.resample(0, &mut r).unwrap()] += 1;
        }
        let expect = [0.25, 0.25, 0.5];
        for (c, e) in counts.iter().zip(expect) {
            assert!((*c as f64 / n as f64 - e).abs() < 0.01);
        }
    }

    #[test]
    fn single_candidate_is_always_returned() {
        let table = HTable::from_raw(0.0, vec![vec![7]], vec![vec![42.0]]);
        let mut r = rng::stream(6, "test/resample", &[]);
        for _ in 0..32 {
            assert_eq!(table.resample(0, &mut r).unwrap(), 7);
        }
    }

    #[test]
    fn table_roundtrip() {
        let table = HTable::from_raw(
            0.001,
            vec![vec![0, 2], vec![], vec![1]],
            vec![vec![0.5, 1.5], vec![], vec![3.0]],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        table.save(&path).unwrap();
        let loaded = HTable::load(&path).unwrap();
        assert_eq!(table, loaded);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        // Force the model output to equal -noise/sigma by probing the loss
        // identity directly: s·σ + ε = 0.
        let sde = SdeSpec::default_ve();
        let t = 0.5;
        let sigma = sde.sigma(t);
        let noise = arr1(&[0.7]);
        // Build a model whose output is exactly -noise/sigma using the zero
        // model plus a bias on the output layer.
        let mut model = small_model(false, true, 3);
        let ranges = crate::nn::layer_ranges(&model.trunk);
        let (_, br) = ranges.last().unwrap().clone();
        model.theta[br.start] = -noise[0] / sigma;
        let loss = cdsm_loss(
            &model,
            &sde,
            None,
            arr1(&[0.2]).view(),
            t,
            noise.view(),
            WeightMode::SigmaSquared,
        )
        .unwrap();
        assert!(loss.abs() < 1e-20);
    }

    #[test]
    fn zero_model_loss_equals_noise_norm() {
        let sde = SdeSpec::default_ve();
        let model = small_model(true, true, 4);
        let noise = arr1(&[1.3]);
        let loss = cdsm_loss(
            &model,
            &sde,
            Some(arr1(&[0.0]).view()),
            arr1(&[0.2]).view(),
            0.37,
            noise.view(),
            WeightMode::SigmaSquared,
        )
        .unwrap();
        assert!((loss - noise[0] * noise[0]).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::Rng as _;
        let sde = SdeSpec::default_ve();
        let model = small_model(true, false, 5);
        let xs = arr2(&[[0.4], [-0.2], [1.0]]);
        let ys = arr2(&[[1.1], [0.3], [-0.6]]);
        let ts = [0.2, 0.6, 0.95];
        let noises = arr2(&[[0.3], [-1.2], [0.8]]);
        let mut grad = vec![0.0; model.param_count()];
        batch_loss_grad(
            &model,
            &sde,
            Some(&xs),
            &ys,
            &ts,
            &noises,
            WeightMode::SigmaSquared,
            Some(&mut grad),
        )
        .unwrap();
        let loss_at = |theta: &[f64]| {
            let m = model.with_params(theta.to_vec());
            batch_loss_grad(&m, &sde, Some(&xs), &ys, &ts, &noises, WeightMode::SigmaSquared, None)
                .unwrap()
        };
        let mut probe = rng::stream(9, "test/cdsm-fd", &[]);
        let mut checked = 0;
        while checked < 32 {
            let i = probe.gen_range(0..model.param_count());
            let h = 1e-4;
            let mut plus = model.theta.clone();
            plus[i] += h;
            let mut minus = model.theta.clone();
            minus[i] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs());
            if denom < 1e-10 {
                continue;
            }
            assert!(
                (fd - grad[i]).abs() / denom < 1e-3,
                "coord {i}: fd {fd} vs backprop {}",
                grad[i]
            );
            checked += 1;
        }
    }

    #[test]
    fn paired_loss_equals_cdsm_loss_under_hard_coupling() {
        let sde = SdeSpec::default_ve();
        let model = small_model(true, false, 6);
        let p = EmpiricalMeasure::uniform(arr2(&[[-1.0], [1.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[-2.0], [2.0]])).unwrap();
        let x_cond = vec![0usize, 1];
        let noise = arr1(&[0.5]);
        for j in 0..2 {
            let a = paired_dsm_loss(
                &model,
                &sde,
                &x_cond,
                &p,
                &q,
                j,
                0.4,
                noise.view(),
                WeightMode::SigmaSquared,
            )
            .unwrap();
            let b = cdsm_loss(
                &model,
                &sde,
                Some(p.point(x_cond[j])),
                q.point(j),
                0.4,
                noise.view(),
                WeightMode::SigmaSquared,
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let sde = SdeSpec::default_ve();
        let model = small_model(false, false, 7);
        let theta0 = model.theta.clone();
        let q = EmpiricalMeasure::uniform(arr2(&[[0.0], [1.0]])).unwrap();
        let cfg = CdsmTrainConfig { n_iter: 0, seed: 7, ..Default::default() };
        let trained = train_unconditional(model, &sde, &q, &cfg).unwrap();
        assert_eq!(trained.model.theta, theta0);
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let sde = SdeSpec::default_ve();
        let q = EmpiricalMeasure::uniform(arr2(&[[0.0], [1.0], [2.0]])).unwrap();
        let cfg = CdsmTrainConfig { n_iter: 12, batch_size: 4, seed: 11, ..Default::default() };
        let a = train_unconditional(small_model(false, true, 11), &sde, &q, &cfg).unwrap();
        let b = train_unconditional(small_model(false, true, 11), &sde, &q, &cfg).unwrap();
        assert_eq!(a.model.theta, b.model.theta);
        assert_eq!(a.opt.ema, b.opt.ema);
    }

    #[test]
    fn cdsm_gradient_is_bit_identical_to_paired_gradient_for_one_candidate_tables() {
        // A paired dataset encoded as a one-candidate table must reproduce
        // the paired batch assembly draw for draw.
        let sde = SdeSpec::default_ve();
        let p = EmpiricalMeasure::uniform(arr2(&[[-1.0], [0.0], [1.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[-2.0], [0.5], [2.0]])).unwrap();
        let pairing = vec![2usize, 0, 1]; // target index per source
        let table = HTable::from_raw(
            0.0,
            pairing.iter().map(|j| vec![*j]).collect(),
            vec![vec![1.0]; 3],
        );
        let cfg = CdsmTrainConfig { batch_size: 8, seed: 21, ..Default::default() };
        let model = small_model(true, false, 21);
        let via_table = assemble_batch(
            &CouplingSource::Discrete { p: &p, q: &q, table: &table },
            true,
            1,
            0,
            &cfg,
        )
        .unwrap();
        let via_pairs = assemble_batch(
            &CouplingSource::Paired { p: &p, q: &q, target_of_source: &pairing },
            true,
            1,
            0,
            &cfg,
        )
        .unwrap();
        assert_eq!(via_table.ys, via_pairs.ys);
        assert_eq!(via_table.xs, via_pairs.xs);
        assert_eq!(via_table.ts, via_pairs.ts);
        assert_eq!(via_table.noises, via_pairs.noises);

        let mut g1 = vec![0.0; model.param_count()];
        let mut g2 = vec![0.0; model.param_count()];
        batch_loss_grad(
            &model,
            &sde,
            via_table.xs.as_ref(),
            &via_table.ys,
            &via_table.ts,
            &via_table.noises,
            WeightMode::SigmaSquared,
            Some(&mut g1),
        )
        .unwrap();
        batch_loss_grad(
            &model,
            &sde,
            via_pairs.xs.as_ref(),
            &via_pairs.ys,
            &via_pairs.ts,
            &via_pairs.noises,
            WeightMode::SigmaSquared,
            Some(&mut g2),
        )
        .unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn continuous_resampling_uniform_when_h_constant() {
        let pp = one_pair_potentials();
        // Candidates drawn from a tight cluster all get essentially equal H;
        // check the picked values spread over the cluster rather than
        // collapsing to one candidate slot.
        let q = crate::data::GaussianGen::new(vec![0.5], 0.01).unwrap();
        let x = arr1(&[0.4]);
        let mut r = rng::stream(31, "test/cont", &[]);
        let mut picked = Vec::new();
        for _ in 0..2000 {
            let y = resample_continuous(&pp, x.view(), &q, 4, 4, &mut r).unwrap().unwrap();
            picked.push(y[0]);
        }
        let mean = picked.iter().sum::<f64>() / picked.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn training_progress_on_degenerate_target() {
        // Single-point target: the loss window at the end must be below the
        // window at the start.
        let sde = SdeSpec::default_ve();
        let q = EmpiricalMeasure::uniform(arr2(&[[2.0]])).unwrap();
        let cfg = CdsmTrainConfig {
            n_iter: 400,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 13,
            log_every: 10,
            ..Default::default()
        };
        let trained = train_unconditional(small_model(false, true, 13), &sde, &q, &cfg).unwrap();
        let losses: Vec<f64> = trained.log.losses.iter().map(|(_, l)| *l).collect();
        let k = losses.len() / 10;
        let head: f64 = losses[..k.max(1)].iter().sum::<f64>() / k.max(1) as f64;
        let tail: f64 = losses[losses.len() - k.max(1)..].iter().sum::<f64>() / k.max(1) as f64;
        assert!(tail < head, "loss did not decrease: head {head}, tail {tail}");
    }
}
