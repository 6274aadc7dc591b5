//! Parameterized dual potentials of the L2-regularized transport problems,
//! their stochastic dual objective, training, and the compatibility function
//! the estimated plan is built from.
//!
//! The dual pair `(u, v)` maximizes
//!
//! ```text
//! F(u, v) = E_p[u] + E_q[v] - (1/4ε) E_{p×q}[ I(x,y) ((u(x)+v(y)-ξ(x,y))_+)² ]
//! ```
//!
//! and the compatibility is `H(x,y) = (1/2ε) I(x,y) (u(x)+v(y)-ξ(x,y))_+`,
//! with the plan reconstructed as `π̂(x,y) = H(x,y) p(x) q(y)`. A trained
//! pair is immutable and safe to evaluate concurrently.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::data::PointSampler;
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{self, Activation, AdamState, LayerSpec, MlpSpec};
use crate::ot::{EmpiricalMeasure, KeypointSet, OtMode, OtProblem};
use crate::plan::PlanMatrix;
use crate::rng::{self, purpose};

/// Positive parts are clamped here before squaring; reaching the clamp means
/// the learning rate is too large for the chosen epsilon.
pub const SLACK_CLAMP: f64 = 1e6;

/// Training hyperparameters for the dual pair.
#[derive(Debug, Clone)]
pub struct PotentialTrainConfig {
    pub learning_rate: f64,
    /// Optional final learning rate; when set, the step size decays
    /// geometrically from `learning_rate` to this value over the run
    /// (coarse approach first, fine resolution of the contact set last).
    pub lr_final: Option<f64>,
    pub batch_size: usize,
    pub n_iter: usize,
    pub seed: u64,
    /// Hidden layer widths shared by both nets.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Cadence of dual-value log rows (iterations).
    pub log_every: usize,
    /// Cadence of the relative-change-of-H monitor; 0 disables it.
    pub monitor_every: usize,
    /// Probe points per side for the monitor.
    pub monitor_points: usize,
}

impl Default for PotentialTrainConfig {
    fn default() -> Self {
        PotentialTrainConfig {
            learning_rate: 1e-5,
            lr_final: None,
            batch_size: 256,
            n_iter: 10_000,
            seed: 0,
            hidden: vec![1024],
            activation: Activation::Tanh,
            log_every: 100,
            monitor_every: 0,
            monitor_points: 128,
        }
    }
}

impl PotentialTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0) {
            bad.push("ot.lr must be > 0".to_string());
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0) {
                bad.push("ot.lr_final must be > 0".to_string());
            }
        }
        if self.batch_size == 0 {
            bad.push("ot.batch_size must be >= 1".to_string());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            bad.push("ot.hidden must be a nonempty list of positive widths".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigValidation { fields: bad })
        }
    }
}

/// Two scalar networks sharing one flat parameter vector.
#[derive(Debug, Clone)]
pub struct PotentialPair {
    pub problem: OtProblem,
    pub u_spec: MlpSpec,
    pub v_spec: MlpSpec,
    /// `[u parameters | v parameters]`.
    pub omega: Vec<f64>,
}

impl PotentialPair {
    /// Fresh pair with uniform `±sqrt(1/fan_in)` initialization, so both
    /// potentials (and therefore H) start near zero.
    pub fn init(
        problem: OtProblem,
        dim_x: usize,
        dim_y: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut dims_u = vec![dim_x];
        dims_u.extend_from_slice(hidden);
        dims_u.push(1);
        let mut dims_v = vec![dim_y];
        dims_v.extend_from_slice(hidden);
        dims_v.push(1);
        let u_spec = MlpSpec::new(&dims_u, activation);
        let v_spec = MlpSpec::new(&dims_v, activation);
        let mut r = rng::stream(seed, purpose::OT_INIT, &[]);
        let mut omega = u_spec.init_params(&mut r);
        omega.extend(v_spec.init_params(&mut r));
        PotentialPair { problem, u_spec, v_spec, omega }
    }

    pub fn param_count(&self) -> usize {
        self.omega.len()
    }

    fn split_params(&self) -> (&[f64], &[f64]) {
        self.omega.split_at(self.u_spec.param_count())
    }

    /// `u` over a batch of source points.
    pub fn u_batch(&self, xs: ArrayView2<'_, f64>) -> Array1<f64> {
        let (pu, _) = self.split_params();
        nn::mlp_forward(&self.u_spec, pu, &xs.to_owned()).column(0).to_owned()
    }

    /// `v` over a batch of target points.
    pub fn v_batch(&self, ys: ArrayView2<'_, f64>) -> Array1<f64> {
        let (_, pv) = self.split_params();
        nn::mlp_forward(&self.v_spec, pv, &ys.to_owned()).column(0).to_owned()
    }

    pub fn u_one(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.u_batch(x.insert_axis(Axis(0)))[0]
    }

    pub fn v_one(&self, y: ArrayView1<'_, f64>) -> f64 {
        self.v_batch(y.insert_axis(Axis(0)))[0]
    }

    /// Gradient of `v` with respect to its input point.
    pub fn grad_y_v(&self, y: ArrayView1<'_, f64>) -> Array1<f64> {
        let (_, pv) = self.split_params();
        nn::mlp_input_gradient(&self.v_spec, pv, &y.to_owned())
    }

    /// `H(x, y) = (1/2ε) I(x,y) (u(x)+v(y)-ξ(x,y))_+`.
    pub fn compatibility(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
        let mask = self.problem.mask(x, y);
        if mask == 0.0 {
            return Ok(0.0);
        }
        let slack = self.u_one(x) + self.v_one(y) - self.problem.xi(x, y)?;
        Ok(slack.max(0.0) / (2.0 * self.problem.epsilon))
    }

    /// Dense compatibility values over two point blocks.
    pub fn compatibility_matrix(
        &self,
        xs: ArrayView2<'_, f64>,
        ys: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let u = self.u_batch(xs);
        let v = self.v_batch(ys);
        let (xi, mask) = self.problem.xi_matrix(xs, ys)?;
        let inv = 1.0 / (2.0 * self.problem.epsilon);
        let mut h = Array2::zeros((xs.nrows(), ys.nrows()));
        for i in 0..xs.nrows() {
            for j in 0..ys.nrows() {
                h[[i, j]] = inv * mask[[i, j]] * (u[i] + v[j] - xi[[i, j]]).max(0.0);
            }
        }
        Ok(h)
    }

    /// `H(x, ·)` against a block of candidate targets, with `u(x)` computed
    /// once. Used by the continuous resampling path.
    pub fn compatibility_against(
        &self,
        x: ArrayView1<'_, f64>,
        ys: ArrayView2<'_, f64>,
    ) -> Result<Array1<f64>> {
        let h = self.compatibility_matrix(x.insert_axis(Axis(0)), ys)?;
        Ok(h.row(0).to_owned())
    }

    /// Reconstruct the plan `π̂_ij = H(x_i, y_j) p_i q_j` and report how far
    /// its marginals are from `p` and `q`.
    pub fn plan_estimate(&self, p: &EmpiricalMeasure, q: &EmpiricalMeasure) -> Result<PlanEstimate> {
        let mut entries = self.compatibility_matrix(p.coords_view(), q.coords_view())?;
        for (i, pi) in p.weights().iter().enumerate() {
            for (j, qj) in q.weights().iter().enumerate() {
                entries[[i, j]] *= pi * qj;
            }
        }
        let plan = PlanMatrix::new(entries, p.weights().clone(), q.weights().clone());
        let (row_violation, col_violation) = plan.marginal_violations();
        Ok(PlanEstimate { plan, row_violation, col_violation })
    }

    /// The stochastic dual objective of the regularized problem on one
    /// minibatch pair, penalty taken over the full batch cross-product.
    pub fn dual_objective(&self, xs: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>) -> Result<f64> {
        let (value, _, _) = self.dual_objective_grad(xs, ys, false)?;
        Ok(value)
    }

    /// Objective value, ascent gradient with respect to omega (when asked),
    /// and the number of clamped slack entries.
    pub fn dual_objective_grad(
        &self,
        xs: ArrayView2<'_, f64>,
        ys: ArrayView2<'_, f64>,
        with_grad: bool,
    ) -> Result<(f64, Vec<f64>, u64)> {
        let (n, m) = (xs.nrows(), ys.nrows());
        if n == 0 || m == 0 {
            return Err(Error::invalid("dual_objective", "batches must be nonempty"));
        }
        let (pu, pv) = self.split_params();
        let xb = xs.to_owned();
        let yb = ys.to_owned();
        let (u_out, u_cache) = nn::mlp_forward_cached(&self.u_spec, pu, &xb, with_grad);
        let (v_out, v_cache) = nn::mlp_forward_cached(&self.v_spec, pv, &yb, with_grad);
        let u = u_out.column(0);
        let v = v_out.column(0);
        let (xi, mask) = self.problem.xi_matrix(xs, ys)?;

        let eps = self.problem.epsilon;
        let mut penalty = 0.0;
        let mut clamps = 0u64;
        // Per-sample derivative collectors for the penalty term.
        let mut du = Array1::<f64>::zeros(n);
        let mut dv = Array1::<f64>::zeros(m);
        for i in 0..n {
            for j in 0..m {
                if mask[[i, j]] == 0.0 {
                    continue;
                }
                let slack = u[i] + v[j] - xi[[i, j]];
                if slack <= 0.0 {
                    continue;
                }
                let clamped = if slack > SLACK_CLAMP {
                    clamps += 1;
                    SLACK_CLAMP
                } else {
                    slack
                };
                penalty += clamped * clamped;
                if with_grad && slack <= SLACK_CLAMP {
                    du[i] += slack;
                    dv[j] += slack;
                }
            }
        }
        let nm = (n * m) as f64;
        let value = u.mean().unwrap() + v.mean().unwrap() - penalty / (4.0 * eps * nm);
        if !value.is_finite() {
            return Err(Error::NonFinite { quantity: "dual objective", iteration: 0 });
        }
        if !with_grad {
            return Ok((value, Vec::new(), clamps));
        }

        // d value / d u_i = 1/n - (1/(2 ε n m)) Σ_j slack_ij (active entries)
        let du_out = du.mapv(|s| 1.0 / n as f64 - s / (2.0 * eps * nm));
        let dv_out = dv.mapv(|s| 1.0 / m as f64 - s / (2.0 * eps * nm));
        let mut grad = vec![0.0; self.omega.len()];
        let (gu, gv) = grad.split_at_mut(self.u_spec.param_count());
        nn::mlp_backward(
            &self.u_spec,
            pu,
            &u_cache,
            &du_out.insert_axis(Axis(1)).to_owned(),
            Some(gu),
        );
        nn::mlp_backward(
            &self.v_spec,
            pv,
            &v_cache,
            &dv_out.insert_axis(Axis(1)).to_owned(),
            Some(gv),
        );
        Ok((value, grad, clamps))
    }

    /// Self-describing checkpoint: problem, architectures, parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        use std::io::Write;
        w.write_all(b"OTCSPOT1")?;
        io::write_u8(&mut w, match self.problem.mode {
            OtMode::Unsupervised => 0,
            OtMode::SemiSupervised => 1,
        })?;
        io::write_u8(&mut w, match self.problem.cost_kind {
            crate::ot::CostKind::SquaredL2 => 0,
            crate::ot::CostKind::MeanSquaredL2 => 1,
        })?;
        io::write_f64(&mut w, self.problem.epsilon)?;
        io::write_f64(&mut w, self.problem.tau)?;
        match &self.problem.keypoints {
            None => io::write_u32(&mut w, 0)?,
            Some(kp) => {
                io::write_u32(&mut w, kp.count() as u32)?;
                io::write_u32(&mut w, kp.source().ncols() as u32)?;
                io::write_u32(&mut w, kp.target().ncols() as u32)?;
                for v in kp.source().iter() {
                    io::write_f64(&mut w, *v)?;
                }
                for v in kp.target().iter() {
                    io::write_f64(&mut w, *v)?;
                }
            }
        }
        write_mlp_spec(&mut w, &self.u_spec)?;
        write_mlp_spec(&mut w, &self.v_spec)?;
        io::write_f64_slice(&mut w, &self.omega)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        io::expect_magic(&mut r, b"OTCSPOT1", "potentials checkpoint")?;
        let mode = match io::read_u8(&mut r)? {
            0 => OtMode::Unsupervised,
            1 => OtMode::SemiSupervised,
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown mode tag {other}")));
            }
        };
        let cost_kind = match io::read_u8(&mut r)? {
            0 => crate::ot::CostKind::SquaredL2,
            1 => crate::ot::CostKind::MeanSquaredL2,
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown cost tag {other}")));
            }
        };
        let epsilon = io::read_f64(&mut r)?;
        let tau = io::read_f64(&mut r)?;
        let k = io::read_u32(&mut r)? as usize;
        let keypoints = if k > 0 {
            let dx = io::read_u32(&mut r)? as usize;
            let dy = io::read_u32(&mut r)? as usize;
            let mut source = Array2::zeros((k, dx));
            let mut target = Array2::zeros((k, dy));
            for v in source.iter_mut() {
                *v = io::read_f64(&mut r)?;
            }
            for v in target.iter_mut() {
                *v = io::read_f64(&mut r)?;
            }
            Some(KeypointSet::new(source, target)?)
        } else {
            None
        };
        let problem = match mode {
            OtMode::Unsupervised => OtProblem::unsupervised(cost_kind, epsilon)?,
            OtMode::SemiSupervised => OtProblem::semi_supervised(
                cost_kind,
                epsilon,
                tau,
                keypoints.ok_or_else(|| {
                    Error::CheckpointMismatch("semi-supervised checkpoint without keypoints".into())
                })?,
            )?,
        };
        let u_spec = read_mlp_spec(&mut r)?;
        let v_spec = read_mlp_spec(&mut r)?;
        let omega = io::read_f64_vec(&mut r)?;
        if omega.len() != u_spec.param_count() + v_spec.param_count() {
            return Err(Error::CheckpointMismatch(format!(
                "parameter count {} does not match architecture",
                omega.len()
            )));
        }
        Ok(PotentialPair { problem, u_spec, v_spec, omega })
    }

    /// Guard used by commands that receive both a config and a checkpoint.
    pub fn verify_mode(&self, expected: &OtProblem) -> Result<()> {
        if self.problem.mode != expected.mode {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is {} but config asks for {}",
                self.problem.mode.name(),
                expected.mode.name()
            )));
        }
        Ok(())
    }
}

fn write_mlp_spec<W: std::io::Write>(w: &mut W, spec: &MlpSpec) -> Result<()> {
    io::write_u32(w, spec.layers.len() as u32)?;
    for l in &spec.layers {
        io::write_u32(w, l.in_dim as u32)?;
        io::write_u32(w, l.out_dim as u32)?;
        io::write_u8(w, match l.act {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Silu => 2,
        })?;
    }
    Ok(())
}

fn read_mlp_spec<R: std::io::Read>(r: &mut R) -> Result<MlpSpec> {
    let n = io::read_u32(r)? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = io::read_u32(r)? as usize;
        let out_dim = io::read_u32(r)? as usize;
        let act = match io::read_u8(r)? {
            0 => Activation::Identity,
            1 => Activation::Tanh,
            2 => Activation::Silu,
            other => {
                return Err(Error::CheckpointMismatch(format!("unknown activation tag {other}")));
            }
        };
        layers.push(LayerSpec { in_dim, out_dim, act });
    }
    Ok(MlpSpec { layers })
}

/// A reconstructed plan plus its marginal defects.
#[derive(Debug, Clone)]
pub struct PlanEstimate {
    pub plan: PlanMatrix,
    pub row_violation: f64,
    pub col_violation: f64,
}

impl PlanEstimate {
    pub fn total_violation(&self) -> f64 {
        self.row_violation + self.col_violation
    }
}

/// Diagnostics emitted by `train_potentials`.
#[derive(Debug, Clone, Default)]
pub struct PotentialTrainLog {
    /// `(iteration, dual value)` rows.
    pub dual_values: Vec<(usize, f64)>,
    /// `(iteration, relative change of H since the previous monitor row)`.
    pub h_relative_change: Vec<(usize, f64)>,
    pub clamp_events: u64,
}

/// Mini-batch Adam ascent on the dual objective (empirical measures).
pub fn train_potentials(
    problem: &OtProblem,
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    cfg: &PotentialTrainConfig,
) -> Result<(PotentialPair, PotentialTrainLog)> {
    train_potentials_with(problem, p, q, cfg)
}

/// Same loop over any pair of point sources (continuous generators included).
pub fn train_potentials_with<PX: PointSampler, PY: PointSampler>(
    problem: &OtProblem,
    p: &PX,
    q: &PY,
    cfg: &PotentialTrainConfig,
) -> Result<(PotentialPair, PotentialTrainLog)> {
    cfg.validate()?;
    let mut pair = PotentialPair::init(
        problem.clone(),
        p.dim(),
        q.dim(),
        &cfg.hidden,
        cfg.activation,
        cfg.seed,
    );
    let mut log = PotentialTrainLog::default();
    let mut adam = AdamState::new(cfg.learning_rate, &pair.omega, 0.999);

    // Fixed probe blocks for the relative-change-of-H monitor.
    let monitor = if cfg.monitor_every > 0 {
        let mut r = rng::stream(cfg.seed, purpose::OT_BATCH, &[u64::MAX]);
        let xs = p.sample_batch(&mut r, cfg.monitor_points);
        let ys = q.sample_batch(&mut r, cfg.monitor_points);
        Some((xs, ys))
    } else {
        None
    };
    let mut h_prev: Option<Array2<f64>> = None;

    let lr_ratio = cfg.lr_final.map(|f| f / cfg.learning_rate);
    for iter in 0..cfg.n_iter {
        if let Some(ratio) = lr_ratio {
            let frac = iter as f64 / (cfg.n_iter.max(2) - 1) as f64;
            adam.lr = cfg.learning_rate * ratio.powf(frac);
        }
        let mut rx = rng::stream(cfg.seed, purpose::OT_BATCH, &[iter as u64, 0]);
        let mut ry = rng::stream(cfg.seed, purpose::OT_BATCH, &[iter as u64, 1]);
        let xs = p.sample_batch(&mut rx, cfg.batch_size);
        let ys = q.sample_batch(&mut ry, cfg.batch_size);
        let (value, grad, clamps) = pair
            .dual_objective_grad(xs.view(), ys.view(), true)
            .map_err(|e| match e {
                Error::NonFinite { quantity, .. } => Error::NonFinite { quantity, iteration: iter },
                other => other,
            })?;
        log.clamp_events += clamps;
        // Ascent: descend the negated gradient.
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        adam.step(&mut pair.omega, &neg, iter)?;

        if cfg.log_every > 0 && (iter % cfg.log_every == 0 || iter + 1 == cfg.n_iter) {
            log.dual_values.push((iter, value));
        }
        if let Some((xs, ys)) = &monitor {
            if (iter + 1) % cfg.monitor_every == 0 {
                let h = pair.compatibility_matrix(xs.view(), ys.view())?;
                if let Some(prev) = &h_prev {
                    let num = (&h - prev).mapv(|v| v * v).mean().unwrap().sqrt();
                    let den = prev.mapv(|v| v * v).mean().unwrap().sqrt().max(1e-300);
                    log.h_relative_change.push((iter + 1, num / den));
                }
                h_prev = Some(h);
            }
        }
    }
    Ok((pair, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot::CostKind;
    use ndarray::{arr1, arr2};
    use rand::Rng;

    fn single_point_instance() -> (OtProblem, EmpiricalMeasure, EmpiricalMeasure) {
        // p = δ_0, q = δ_1, squared cost -> ξ = 1, ε = 0.25.
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.25).unwrap();
        let p = EmpiricalMeasure::uniform(arr2(&[[0.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[1.0]])).unwrap();
        (problem, p, q)
    }

    #[test]
    fn zero_potentials_give_zero_objective_for_nonnegative_xi() {
        let (problem, p, q) = single_point_instance();
        let mut pair = PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 0);
        pair.omega.iter_mut().for_each(|w| *w = 0.0);
        let value = pair.dual_objective(p.coords_view(), q.coords_view()).unwrap();
        assert_eq!(value, 0.0);
    }

    #[test]
    fn single_pair_closed_form_optimum() {
        // As a function of s = u+v the objective is s - (s-1)_+²,
        // maximized at s = 1.5 with value 1.25.
        let (problem, p, q) = single_point_instance();
        let cfg = PotentialTrainConfig {
            learning_rate: 5e-3,
            batch_size: 8,
            n_iter: 3000,
            seed: 42,
            hidden: vec![32],
            ..Default::default()
        };
        let (pair, log) = train_potentials(&problem, &p, &q, &cfg).unwrap();
        let s = pair.u_one(p.point(0)) + pair.v_one(q.point(0));
        assert!((s - 1.5).abs() < 0.05, "u+v = {s}");
        let value = pair.dual_objective(p.coords_view(), q.coords_view()).unwrap();
        assert!((value - 1.25).abs() < 0.02, "dual value = {value}");
        assert_eq!(log.clamp_events, 0);

        // H at the optimum: (1/2ε)·(1.5-1)_+ = 1, so the plan is [[1.0]].
        let h = pair.compatibility(p.point(0), q.point(0)).unwrap();
        assert!((h - 1.0).abs() < 0.1);
        let est = pair.plan_estimate(&p, &q).unwrap();
        assert!((est.plan.entries[[0, 0]] - 1.0).abs() < 0.1);
        assert!(est.total_violation() < 0.2);
    }

    #[test]
    fn zero_iterations_return_initialized_pair() {
        let (problem, p, q) = single_point_instance();
        let cfg = PotentialTrainConfig {
            n_iter: 0,
            seed: 7,
            hidden: vec![16],
            ..Default::default()
        };
        let (trained, _) = train_potentials(&problem, &p, &q, &cfg).unwrap();
        let fresh = PotentialPair::init(trained.problem.clone(), 1, 1, &[16], Activation::Tanh, 7);
        assert_eq!(trained.omega, fresh.omega);
    }

    #[test]
    fn seeded_training_is_bit_reproducible() {
        let (problem, p, q) = single_point_instance();
        let cfg = PotentialTrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            n_iter: 50,
            seed: 99,
            hidden: vec![16],
            ..Default::default()
        };
        let (a, _) = train_potentials(&problem, &p, &q, &cfg).unwrap();
        let (b, _) = train_potentials(&problem, &p, &q, &cfg).unwrap();
        assert_eq!(a.omega, b.omega);
    }

    #[test]
    fn dual_gradient_matches_finite_differences() {
        let problem = OtProblem::unsupervised(CostKind::SquaredL2, 0.5).unwrap();
        let mut pair = PotentialPair::init(problem, 1, 1, &[12], Activation::Tanh, 3);
        // Move outputs into a regime where some slacks are positive.
        let xs = arr2(&[[0.1], [-0.4], [0.7]]);
        let ys = arr2(&[[0.0], [0.3]]);
        for w in pair.omega.iter_mut() {
            *w *= 3.0;
        }
        let (_, grad, _) = pair.dual_objective_grad(xs.view(), ys.view(), true).unwrap();
        let mut probe = rng::stream(5, "test/dual-fd", &[]);
        let mut checked = 0;
        while checked < 16 {
            let i = probe.gen_range(0..pair.omega.len());
            let h = 1e-4;
            let mut plus = pair.clone();
            plus.omega[i] += h;
            let mut minus = pair.clone();
            minus.omega[i] -= h;
            let fd = (plus.dual_objective(xs.view(), ys.view()).unwrap()
                - minus.dual_objective(xs.view(), ys.view()).unwrap())
                / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs());
            if denom < 1e-10 {
                continue;
            }
            assert!(
                (fd - grad[i]).abs() / denom < 1e-4,
                "coord {i}: fd {fd} vs analytic {}",
                grad[i]
            );
            checked += 1;
        }
    }

    #[test]
    fn gauge_shift_leaves_compatibility_unchanged() {
        let (problem, p, q) = single_point_instance();
        let pair = PotentialPair::init(problem, 1, 1, &[16], Activation::Tanh, 11);
        let h0 = pair.compatibility(p.point(0), q.point(0)).unwrap();
        let mut shifted = pair.clone();
        // Final bias of u sits at the end of the u block; same for v.
        let nu = shifted.u_spec.param_count();
        let kappa = 0.37;
        shifted.omega[nu - 1] += kappa;
        let total = shifted.omega.len();
        shifted.omega[total - 1] -= kappa;
        let h1 = shifted.compatibility(p.point(0), q.point(0)).unwrap();
        assert!((h0 - h1).abs() < 1e-12);
    }

    #[test]
    fn compatibility_scales_inversely_with_epsilon() {
        let pair_eps = |eps: f64| {
            let problem = OtProblem::unsupervised(CostKind::SquaredL2, eps).unwrap();
            let mut pp = PotentialPair::init(problem, 1, 1, &[16], Activation::Tanh, 21);
            // Lift u's final bias so the slack is positive.
            let nu = pp.u_spec.param_count();
            pp.omega[nu - 1] += 2.0;
            pp
        };
        let a = pair_eps(0.5);
        let b = pair_eps(1.0);
        let x = arr1(&[0.2]);
        let y = arr1(&[0.4]);
        let ha = a.compatibility(x.view(), y.view()).unwrap();
        let hb = b.compatibility(x.view(), y.view()).unwrap();
        assert!(ha > 0.0);
        assert!((ha - 2.0 * hb).abs() < 1e-12);
    }

    #[test]
    fn masked_pairs_have_zero_compatibility() {
        let p = EmpiricalMeasure::uniform(arr2(&[[-4.0], [4.0]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[-5.0], [5.0]])).unwrap();
        let kp = KeypointSet::from_indices(&p, &q, &[(0, 0)]).unwrap();
        let problem = OtProblem::semi_supervised(CostKind::SquaredL2, 0.1, 0.1, kp).unwrap();
        let mut pair = PotentialPair::init(problem, 1, 1, &[16], Activation::Tanh, 2);
        let nu = pair.u_spec.param_count();
        pair.omega[nu - 1] += 10.0;
        // keypoint source with a non-partner target: masked out
        let h = pair.compatibility(p.point(0), q.point(1)).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn zero_potentials_give_zero_plan_and_violation_two() {
        let (problem, _, _) = single_point_instance();
        let p = EmpiricalMeasure::uniform(arr2(&[[0.0], [0.5]])).unwrap();
        let q = EmpiricalMeasure::uniform(arr2(&[[1.0], [1.5]])).unwrap();
        let mut pair = PotentialPair::init(problem, 1, 1, &[8], Activation::Tanh, 0);
        pair.omega.iter_mut().for_each(|w| *w = 0.0);
        let est = pair.plan_estimate(&p, &q).unwrap();
        assert_eq!(est.plan.entries.sum(), 0.0);
        assert!((est.total_violation() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (problem, _, _) = single_point_instance();
        let pair = PotentialPair::init(problem, 1, 1, &[16, 8], Activation::Silu, 13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pot.bin");
        pair.save(&path).unwrap();
        let loaded = PotentialPair::load(&path).unwrap();
        assert_eq!(pair.omega, loaded.omega);
        assert_eq!(pair.u_spec, loaded.u_spec);
        assert_eq!(loaded.problem.mode, OtMode::Unsupervised);

        let semi_expected = {
            let p = EmpiricalMeasure::uniform(arr2(&[[-4.0]])).unwrap();
            let q = EmpiricalMeasure::uniform(arr2(&[[4.0]])).unwrap();
            let kp = KeypointSet::from_indices(&p, &q, &[(0, 0)]).unwrap();
            OtProblem::semi_supervised(CostKind::SquaredL2, 0.25, 0.1, kp).unwrap()
        };
        assert!(loaded.verify_mode(&semi_expected).is_err());
    }
}
