//! Reverse-SDE generation: Euler–Maruyama and predictor–corrector
//! integration of
//!
//! ```text
//! dy = [f(y,t) - g(t)² s(y; x, t)] dt + g(t) dw̄
//! ```
//!
//! from the prior (or from a noisy version of the condition at an
//! intermediate time `M`) down to `t_min`. The guided SCONES baseline adds
//! `∇_y log H(x, y)` to an unconditional score instead of conditioning the
//! model.
//!
//! Trajectories are independent: sample `i` draws from streams derived from
//! `(seed, purpose, i)`, so a batch equals `n` separate single-sample runs
//! regardless of evaluation order or batching.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::potentials::PotentialPair;
use crate::rng::{self, purpose};
use crate::score::{ScoreEvaluator, ScoreModel};
use crate::sde::{SdeSpec, HORIZON, T_MIN};

/// Reverse integrators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMethod {
    EulerMaruyama,
    PredictorCorrector,
}

impl SamplerMethod {
    pub fn name(self) -> &'static str {
        match self {
            SamplerMethod::EulerMaruyama => "euler_maruyama",
            SamplerMethod::PredictorCorrector => "predictor_corrector",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "euler_maruyama" | "em" => Ok(SamplerMethod::EulerMaruyama),
            "predictor_corrector" | "pc" => Ok(SamplerMethod::PredictorCorrector),
            other => Err(Error::invalid("sampler.method", format!("unknown method `{other}`"))),
        }
    }
}

/// Where a trajectory starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Draw from the SDE's prior at the horizon.
    Prior,
    /// Diffuse the condition to time `M` and start there.
    NoisyAtM(f64),
}

/// Reverse-sampling configuration.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub method: SamplerMethod,
    pub n_steps: usize,
    /// Signal-to-noise ratio of the Langevin corrector (PC only).
    pub corrector_snr: f64,
    pub init: InitScheme,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: SamplerMethod::EulerMaruyama,
            n_steps: 1000,
            corrector_snr: 0.16,
            init: InitScheme::Prior,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_steps == 0 {
            bad.push("sampler.n_steps must be >= 1".to_string());
        }
        if self.corrector_snr < 0.0 {
            bad.push("sampler.snr must be >= 0".to_string());
        }
        if let InitScheme::NoisyAtM(m) = self.init {
            if !(m > 0.0 && m <= HORIZON) {
                bad.push("sampler.init_m must lie in (0, 1]".to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigValidation { fields: bad })
        }
    }
}

/// Batched score field driving the reverse SDE. All rows share one time.
pub trait ScoreFn {
    fn eval(&self, ys: &Array2<f64>, t: f64) -> Array2<f64>;
}

/// A frozen model evaluated through [`ScoreEvaluator`].
pub struct ModelScore<'a> {
    eval: ScoreEvaluator<'a>,
}

impl<'a> ModelScore<'a> {
    pub fn new(model: &'a ScoreModel, conditions: Option<&Array2<f64>>, n: usize) -> Result<Self> {
        Ok(ModelScore { eval: ScoreEvaluator::new(model, conditions, n)? })
    }
}

impl ScoreFn for ModelScore<'_> {
    fn eval(&self, ys: &Array2<f64>, t: f64) -> Array2<f64> {
        self.eval.eval(ys, t)
    }
}

/// Analytic score field, for oracle-driven tests.
pub struct ClosureScore<F: Fn(ArrayView1<'_, f64>, f64) -> Array1<f64>>(pub F);

impl<F: Fn(ArrayView1<'_, f64>, f64) -> Array1<f64>> ScoreFn for ClosureScore<F> {
    fn eval(&self, ys: &Array2<f64>, t: f64) -> Array2<f64> {
        let mut out = Array2::zeros(ys.raw_dim());
        for (mut row, y) in out.rows_mut().into_iter().zip(ys.rows()) {
            row.assign(&self.0(y, t));
        }
        out
    }
}

/// Unconditional score plus `∇_y log H(x, y)` guidance, clipped to zero
/// wherever `H(x, y) = 0`.
pub struct SconesScore<'a> {
    uncond: ScoreEvaluator<'a>,
    pp: &'a PotentialPair,
    conditions: Array2<f64>,
    /// `u(x_i)` cached per trajectory.
    u_vals: Vec<f64>,
}

impl<'a> SconesScore<'a> {
    pub fn new(
        uncond_model: &'a ScoreModel,
        pp: &'a PotentialPair,
        conditions: Array2<f64>,
    ) -> Result<Self> {
        if uncond_model.arch.conditional {
            return Err(Error::invalid("scones", "the guided baseline uses an unconditional model"));
        }
        let u_vals = pp.u_batch(conditions.view()).to_vec();
        let uncond = ScoreEvaluator::new(uncond_model, None, conditions.nrows())?;
        Ok(SconesScore { uncond, pp, conditions, u_vals })
    }

    /// `∇_y log H(x, y)` at one point: `(∇v(y) - ∇_y ξ(x,y)) / slack` on the
    /// positive-slack region, zero elsewhere.
    pub fn guidance(&self, row: usize, y: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let x = self.conditions.row(row);
        if self.pp.problem.mask(x, y) == 0.0 {
            return Ok(Array1::zeros(y.len()));
        }
        let slack = self.u_vals[row] + self.pp.v_one(y) - self.pp.problem.xi(x, y)?;
        if slack <= 0.0 {
            return Ok(Array1::zeros(y.len()));
        }
        let dv = self.pp.grad_y_v(y);
        let dxi = self.pp.problem.grad_y_xi(x, y)?;
        Ok((dv - dxi) / slack)
    }
}

impl ScoreFn for SconesScore<'_> {
    fn eval(&self, ys: &Array2<f64>, t: f64) -> Array2<f64> {
        let mut s = self.uncond.eval(ys, t);
        for (row, y) in ys.rows().into_iter().enumerate() {
            // Dimensions were checked at construction, so guidance cannot
            // fail here.
            let g = self.guidance(row, y).expect("guidance evaluation");
            let mut target = s.row_mut(row);
            target += &g;
        }
        s
    }
}

/// One Euler–Maruyama update of the reverse SDE.
fn em_update(
    y: &mut Array1<f64>,
    drift: &Array1<f64>,
    g: f64,
    score: ArrayView1<'_, f64>,
    dt: f64,
    z: &Array1<f64>,
) {
    let sqrt_dt = dt.sqrt();
    for i in 0..y.len() {
        y[i] -= (drift[i] - g * g * score[i]) * dt;
        y[i] += g * sqrt_dt * z[i];
    }
}

/// Diffuse a condition to time `M`: the start state for noisy initialization.
pub fn noisy_init<R: Rng + ?Sized>(
    sde: &SdeSpec,
    x: ArrayView1<'_, f64>,
    m: f64,
    rng: &mut R,
) -> Array1<f64> {
    let scale = sde.mean_scale(m);
    let sigma = sde.sigma(m);
    let mut y = Array1::zeros(x.len());
    for i in 0..x.len() {
        let z: f64 = StandardNormal.sample(rng);
        y[i] = scale * x[i] + sigma * z;
    }
    y
}

/// Integrate `n` reverse trajectories under an arbitrary score field.
/// `conditions` must be provided (one row per trajectory) when the init
/// scheme diffuses the condition.
pub fn sample_field(
    score: &dyn ScoreFn,
    sde: &SdeSpec,
    dim: usize,
    n: usize,
    conditions: Option<&Array2<f64>>,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let start_t = match cfg.init {
        InitScheme::Prior => HORIZON,
        InitScheme::NoisyAtM(m) => m,
    };
    let mut states = Array2::zeros((n, dim));
    for i in 0..n {
        let mut r = rng::stream(cfg.seed, purpose::SAMPLE_INIT, &[i as u64]);
        let row = match cfg.init {
            InitScheme::Prior => sde.prior_sample(dim, &mut r),
            InitScheme::NoisyAtM(m) => {
                let conds = conditions.ok_or_else(|| {
                    Error::invalid("sampler.init", "noisy initialization needs conditions")
                })?;
                if conds.ncols() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: conds.ncols() });
                }
                noisy_init(sde, conds.row(i), m, &mut r)
            }
        };
        states.row_mut(i).assign(&row);
    }

    let mut pred_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| rng::stream(cfg.seed, purpose::SAMPLE_PRED, &[i as u64])).collect();
    let mut corr_rngs: Vec<ChaCha8Rng> =
        (0..n).map(|i| rng::stream(cfg.seed, purpose::SAMPLE_CORR, &[i as u64])).collect();

    let dt = (start_t - T_MIN) / cfg.n_steps as f64;
    let mut t = start_t;
    for step in 0..cfg.n_steps {
        // Predictor: one reverse Euler–Maruyama step.
        let scores = score.eval(&states, t);
        let g = sde.diffusion(t);
        for i in 0..n {
            let mut y = states.row(i).to_owned();
            let drift = sde.drift(&y, t);
            let z: Array1<f64> =
                (0..dim).map(|_| StandardNormal.sample(&mut pred_rngs[i])).collect();
            em_update(&mut y, &drift, g, scores.row(i), dt, &z);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { quantity: "sampler state", iteration: step });
            }
            states.row_mut(i).assign(&y);
        }
        t -= dt;

        if cfg.method == SamplerMethod::PredictorCorrector {
            // Langevin corrector at the post-predictor time, with the step
            // size set from the snr and the current score magnitude.
            let scores = score.eval(&states, t);
            for i in 0..n {
                let z: Array1<f64> =
                    (0..dim).map(|_| StandardNormal.sample(&mut corr_rngs[i])).collect();
                let s_norm = scores.row(i).dot(&scores.row(i)).sqrt();
                let z_norm = z.dot(&z).sqrt();
                if s_norm == 0.0 || cfg.corrector_snr == 0.0 {
                    continue;
                }
                let eta = 2.0 * (cfg.corrector_snr * z_norm / s_norm).powi(2);
                let mut y = states.row(i).to_owned();
                for d in 0..dim {
                    y[d] += eta * scores[[i, d]] + (2.0 * eta).sqrt() * z[d];
                }
                states.row_mut(i).assign(&y);
            }
        }
    }
    Ok(states)
}

/// Sample from a trained (frozen) model. Conditional models need one
/// condition row per requested sample.
pub fn sample_model(
    model: &ScoreModel,
    sde: &SdeSpec,
    conditions: Option<&Array2<f64>>,
    n: usize,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    if model.arch.conditional {
        let conds = conditions.ok_or_else(|| {
            Error::invalid("sampler", "conditional model needs condition rows")
        })?;
        if conds.nrows() != n {
            return Err(Error::invalid("sampler", "one condition row per sample"));
        }
        if conds.ncols() != model.arch.data_dim {
            return Err(Error::DimensionMismatch {
                expected: model.arch.data_dim,
                got: conds.ncols(),
            });
        }
    }
    let field = ModelScore::new(model, conditions, n)?;
    sample_field(&field, sde, model.arch.data_dim, n, conditions, cfg)
}

/// Generate one sample by reverse Euler–Maruyama.
pub fn reverse_em(
    model: &ScoreModel,
    sde: &SdeSpec,
    x: Option<ArrayView1<'_, f64>>,
    cfg: &SamplerConfig,
) -> Result<Array1<f64>> {
    let cfg = SamplerConfig { method: SamplerMethod::EulerMaruyama, ..cfg.clone() };
    single(model, sde, x, &cfg)
}

/// Generate one sample by predictor–corrector.
pub fn reverse_pc(
    model: &ScoreModel,
    sde: &SdeSpec,
    x: Option<ArrayView1<'_, f64>>,
    cfg: &SamplerConfig,
) -> Result<Array1<f64>> {
    let cfg = SamplerConfig { method: SamplerMethod::PredictorCorrector, ..cfg.clone() };
    single(model, sde, x, &cfg)
}

fn single(
    model: &ScoreModel,
    sde: &SdeSpec,
    x: Option<ArrayView1<'_, f64>>,
    cfg: &SamplerConfig,
) -> Result<Array1<f64>> {
    let conds = x.map(|x| x.insert_axis(Axis(0)).to_owned());
    let out = sample_model(model, sde, conds.as_ref(), 1, cfg)?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

/// Batched SCONES: unconditional model plus compatibility guidance, one
/// condition row per sample.
pub fn sample_scones(
    uncond: &ScoreModel,
    pp: &PotentialPair,
    sde: &SdeSpec,
    conditions: &Array2<f64>,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    let n = conditions.nrows();
    let field = SconesScore::new(uncond, pp, conditions.clone())?;
    sample_field(&field, sde, uncond.arch.data_dim, n, Some(conditions), cfg)
}

/// One guided sample for a single condition.
pub fn scones_sample(
    uncond: &ScoreModel,
    pp: &PotentialPair,
    x: ArrayView1<'_, f64>,
    sde: &SdeSpec,
    cfg: &SamplerConfig,
) -> Result<Array1<f64>> {
    let conds = x.insert_axis(Axis(0)).to_owned();
    let out = sample_scones(uncond, pp, sde, &conds, cfg)?;
    Ok(out.index_axis(Axis(0), 0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::ot::{CostKind, OtProblem};
    use crate::score::ScoreArchitecture;
    use ndarray::arr1;

    #[test]
    fn em_update_arithmetic() {
        // f = 0, g = 1, s = 2, y = 1, dt = 0.01, z = 0  ->  y' = 1.02
        let mut y = arr1(&[1.0]);
        let drift = arr1(&[0.0]);
        let score = arr1(&[2.0]);
        let z = arr1(&[0.0]);
        em_update(&mut y, &drift, 1.0, score.view(), 0.01, &z);
        assert!((y[0] - 1.02).abs() < 1e-15);
    }

    /// Marginal score of N(0,1) diffused by the VE SDE.
    fn gaussian_ve_score(sde: SdeSpec) -> impl Fn(ArrayView1<'_, f64>, f64) -> Array1<f64> {
        move |y, t| {
            let var = 1.0 + sde.kernel_variance(t);
            y.mapv(|v| -v / var)
        }
    }

    #[test]
    fn analytic_score_recovers_unit_gaussian() {
        let sde = SdeSpec::default_ve();
        let field = ClosureScore(gaussian_ve_score(sde));
        let cfg = SamplerConfig { n_steps: 500, seed: 4, ..Default::default() };
        let n = 4000;
        let out = sample_field(&field, &sde, 1, n, None, &cfg).unwrap();
        let mean = out.column(0).mean().unwrap();
        let var = out.column(0).mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1) as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "var {var}");
    }

    #[test]
    fn pc_with_zero_snr_equals_em() {
        let sde = SdeSpec::default_ve();
        let field = ClosureScore(gaussian_ve_score(sde));
        let em_cfg = SamplerConfig { n_steps: 64, seed: 9, ..Default::default() };
        let pc_cfg = SamplerConfig {
            method: SamplerMethod::PredictorCorrector,
            corrector_snr: 0.0,
            ..em_cfg.clone()
        };
        let a = sample_field(&field, &sde, 1, 8, None, &em_cfg).unwrap();
        let b = sample_field(&field, &sde, 1, 8, None, &pc_cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batching_does_not_change_samples() {
        let sde = SdeSpec::default_ve();
        let field = ClosureScore(gaussian_ve_score(sde));
        let cfg = SamplerConfig { n_steps: 32, seed: 17, ..Default::default() };
        let batch = sample_field(&field, &sde, 1, 4, None, &cfg).unwrap();
        // A 1-sample run must reproduce row 0 exactly.
        let lone = sample_field(&field, &sde, 1, 1, None, &cfg).unwrap();
        assert_eq!(batch.row(0), lone.row(0));
    }

    #[test]
    fn noisy_init_moments_and_zero_limit() {
        let sde = SdeSpec::default_ve();
        let x = arr1(&[3.0]);
        let mut r = rng::stream(3, "test/noisy", &[]);
        let n = 100_000;
        let m = 0.2;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let y = noisy_init(&sde, x.view(), m, &mut r);
            let d = y[0] - x[0];
            sum += d;
            sum2 += d * d;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        let expected = sde.kernel_variance(m);
        assert!((var - expected).abs() / expected < 0.02);

        // M -> 0 returns x exactly (degenerate kernel).
        let y = noisy_init(&sde, x.view(), 0.0, &mut r);
        assert_eq!(y[0], x[0]);

        // determinism
        let mut a = rng::stream(4, "test/noisy", &[1]);
        let mut b = rng::stream(4, "test/noisy", &[1]);
        assert_eq!(noisy_init(&sde, x.view(), m, &mut a), noisy_init(&sde, x.view(), m, &mut b));
    }

    fn zero_potentials() -> PotentialPair {
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.25).unwrap();
        let mut pp = PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 0);
        pp.omega.iter_mut().for_each(|w| *w = 0.0);
        pp
    }

    #[test]
    fn scones_with_zero_compatibility_matches_unconditional() {
        // H ≡ 0 away from x (zero potentials, positive cost): the guidance
        // vanishes and the trajectory must equal the unguided one bit for
        // bit under the same seed.
        let sde = SdeSpec::default_ve();
        let arch = ScoreArchitecture {
            data_dim: 1,
            hidden: 16,
            n_hidden: 2,
            fourier_dim: 8,
            fourier_scale: 4.0,
            conditional: false,
            zero_init_output: false,
        };
        let model = ScoreModel::init(arch, 7).unwrap();
        let pp = zero_potentials();
        let cfg = SamplerConfig { n_steps: 32, seed: 23, ..Default::default() };
        let conditions = ndarray::arr2(&[[-4.0], [-3.5]]);
        let guided = sample_scones(&model, &pp, &sde, &conditions, &cfg).unwrap();
        let plain = sample_model(&model, &sde, None, 2, &cfg).unwrap();
        assert_eq!(guided, plain);
    }

    #[test]
    fn scones_guidance_matches_log_h_finite_difference() {
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.5).unwrap();
        let mut pp = PotentialPair::init(problem, 1, 1, &[16], Activation::Tanh, 5);
        let nu = pp.u_spec.param_count();
        pp.omega[nu - 1] += 4.0; // lift u so some region has positive slack
        let arch = ScoreArchitecture {
            data_dim: 1,
            hidden: 8,
            n_hidden: 2,
            fourier_dim: 4,
            fourier_scale: 2.0,
            conditional: false,
            zero_init_output: true,
        };
        let model = ScoreModel::init(arch, 5).unwrap();
        let conditions = ndarray::arr2(&[[0.3]]);
        let scones = SconesScore::new(&model, &pp, conditions).unwrap();
        let y = arr1(&[0.1]);
        let x = arr1(&[0.3]);
        let h_at = |yv: f64| pp.compatibility(x.view(), arr1(&[yv]).view()).unwrap();
        assert!(h_at(y[0]) > 0.0, "fixture must sit in the positive region");
        let eps = 1e-6;
        let fd = ((h_at(y[0] + eps)).ln() - (h_at(y[0] - eps)).ln()) / (2.0 * eps);
        let g = scones.guidance(0, y.view()).unwrap();
        assert!((fd - g[0]).abs() < 1e-5, "fd {fd} vs guidance {}", g[0]);
    }

    #[test]
    fn zero_score_pure_diffusion_variance() {
        // With a zero score the reverse dynamics for VE are pure diffusion:
        // terminal variance = prior variance + ∫ g² dt over the integration
        // window (the integral equals the kernel-variance difference).
        let sde = SdeSpec::default_ve();
        let field = ClosureScore(|y: ArrayView1<'_, f64>, _t| Array1::zeros(y.len()));
        let cfg = SamplerConfig { n_steps: 400, seed: 31, ..Default::default() };
        let n = 4000;
        let out = sample_field(&field, &sde, 1, n, None, &cfg).unwrap();
        let mean = out.column(0).mean().unwrap();
        let var = out.column(0).mapv(|v| (v - mean) * (v - mean)).sum() / (n - 1) as f64;
        let expected = sde.kernel_variance(HORIZON) * 2.0 - sde.kernel_variance(T_MIN);
        assert!((var - expected).abs() / expected < 0.06, "var {var} vs expected {expected}");
    }
}
