//! Command implementations behind the `otcs` binary. Each command is a pure
//! function of `(config, input files, seed)`; rerunning writes byte-identical
//! outputs under `checkpoints/`, `logs/`, `metrics/`, and `figures/`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::Serialize;
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::cdsm::{self, CdsmTrainConfig, CouplingSource, HTable};
use crate::config::{CouplingMode, ExperimentConfig};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::io::write_series_csv;
use crate::metrics::{
    self, categorical_sampler, conditional_plan_density, expected_w2, histogram, ExpectedW2,
    GaussianSummary,
};
use crate::oracle;
use crate::ot::{EmpiricalMeasure, OtProblem};
use crate::potentials::{self, PotentialPair, PotentialTrainLog};
use crate::rng::{self, purpose};
use crate::samplers::{sample_model, sample_scones, SamplerConfig};
use crate::score::ScoreModel;

/// Standard output layout.
pub struct OutDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub logs: PathBuf,
    pub metrics: PathBuf,
    pub figures: PathBuf,
}

impl OutDirs {
    pub fn create(root: &Path) -> Result<Self> {
        let dirs = OutDirs {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            logs: root.join("logs"),
            metrics: root.join("metrics"),
            figures: root.join("figures"),
        };
        for d in [&dirs.root, &dirs.checkpoints, &dirs.logs, &dirs.metrics, &dirs.figures] {
            std::fs::create_dir_all(d)?;
        }
        Ok(dirs)
    }
}

/// Sources plus deterministic empirical snapshots for training and
/// evaluation.
pub struct Materialized {
    pub p_src: DataSource,
    pub q_src: DataSource,
    /// Training snapshots (`data.n_train` points each).
    pub p_train: EmpiricalMeasure,
    pub q_train: EmpiricalMeasure,
    /// Reference target snapshot the plan conditional is summarized on. In
    /// discrete mode this is the training snapshot itself.
    pub q_ref: EmpiricalMeasure,
    /// Large source snapshot used for probe quantiles.
    pub p_ref: EmpiricalMeasure,
}

pub fn materialize(cfg: &ExperimentConfig) -> Result<Materialized> {
    let p_src = cfg.build_source(&cfg.data.p)?;
    let q_src = cfg.build_source(&cfg.data.q)?;
    let data_seed = rng::sub_seed(cfg.seed, "data");
    let mut r0 = rng::stream(data_seed, purpose::DATA, &[0]);
    let mut r1 = rng::stream(data_seed, purpose::DATA, &[1]);
    let p_train = p_src.snapshot(&mut r0, cfg.data.n_train)?;
    let q_train = q_src.snapshot(&mut r1, cfg.data.n_train)?;
    let (q_ref, p_ref) = match cfg.data.mode {
        CouplingMode::Discrete => (q_train.clone(), p_train.clone()),
        CouplingMode::Continuous => {
            let mut r2 = rng::stream(data_seed, purpose::DATA, &[2]);
            let mut r3 = rng::stream(data_seed, purpose::DATA, &[3]);
            (
                q_src.snapshot(&mut r2, cfg.eval.reference_target_count)?,
                p_src.snapshot(&mut r3, cfg.eval.reference_target_count.max(cfg.data.n_train))?,
            )
        }
    };
    Ok(Materialized { p_src, q_src, p_train, q_train, q_ref, p_ref })
}

fn train_potentials_for(
    cfg: &ExperimentConfig,
    problem: &OtProblem,
    data: &Materialized,
) -> Result<(PotentialPair, PotentialTrainLog)> {
    match cfg.data.mode {
        CouplingMode::Discrete => {
            potentials::train_potentials(problem, &data.p_train, &data.q_train, &cfg.ot.train)
        }
        CouplingMode::Continuous => potentials::train_potentials_with(
            problem,
            &data.p_src,
            &data.q_src,
            &cfg.ot.train,
        ),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", serde_json::to_string_pretty(value).expect("json serialization"))?;
    Ok(())
}

fn config_echo(cfg: &ExperimentConfig) -> serde_json::Value {
    json!(cfg.raw)
}

/// Train the dual potentials, write the checkpoint, the dual-value log, and
/// the relative-change-of-H monitor series.
pub fn cmd_fit_ot(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dirs = OutDirs::create(out)?;
    let data = materialize(cfg)?;
    let problem = cfg.build_problem(cfg.ot.epsilon, &data.p_train, &data.q_train)?;
    let (pair, log) = train_potentials_for(cfg, &problem, &data)?;

    let ckpt = dirs.checkpoints.join("potentials.bin");
    pair.save(&ckpt)?;
    write_series_csv(&dirs.logs.join("dual_value.csv"), "iteration,dual_value", &log.dual_values)?;
    write_series_csv(
        &dirs.logs.join("h_relative_change.csv"),
        "iteration,relative_change",
        &log.h_relative_change,
    )?;
    if log.clamp_events > 0 {
        eprintln!(
            "warning: {} clamped slack terms; the learning rate is likely too large for epsilon={}",
            log.clamp_events, cfg.ot.epsilon
        );
    }

    let est = pair.plan_estimate(&data.p_train, &data.q_ref)?;
    let final_dual = log.dual_values.last().map(|(_, v)| *v);
    write_json(
        &dirs.metrics.join("fit_ot.json"),
        &json!({
            "config": config_echo(cfg),
            "metrics": {
                "final_dual_value": final_dual,
                "plan_row_violation": est.row_violation,
                "plan_col_violation": est.col_violation,
                "clamp_events": log.clamp_events,
            }
        }),
    )?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub l1_distance: f64,
    pub exact_kkt_residual: f64,
    pub exact_marginal_violation: f64,
    pub exact_iterations: usize,
    pub estimate_row_violation: f64,
    pub estimate_col_violation: f64,
}

/// Solve the discrete instance exactly and diff the dual-trained plan
/// against it.
pub fn cmd_oracle(cfg: &ExperimentConfig, potentials_path: &Path, out: &Path) -> Result<OracleReport> {
    let dirs = OutDirs::create(out)?;
    let data = materialize(cfg)?;
    let pair = PotentialPair::load(potentials_path)?;
    let expected = cfg.build_problem(cfg.ot.epsilon, &data.p_train, &data.q_train)?;
    pair.verify_mode(&expected)?;

    let solved = oracle::solve_exact(&pair.problem, &data.p_train, &data.q_train, cfg.oracle_tol)?;
    let est = pair.plan_estimate(&data.p_train, &data.q_train)?;
    solved.plan.write_csv(&dirs.metrics.join("exact_plan.csv"))?;
    est.plan.write_csv(&dirs.metrics.join("reconstructed_plan.csv"))?;

    let report = OracleReport {
        l1_distance: solved.plan.l1_distance(&est.plan),
        exact_kkt_residual: solved.kkt_residual,
        exact_marginal_violation: solved.marginal_violation,
        exact_iterations: solved.iterations,
        estimate_row_violation: est.row_violation,
        estimate_col_violation: est.col_violation,
    };
    write_json(
        &dirs.metrics.join("oracle.json"),
        &json!({ "config": config_echo(cfg), "metrics": report }),
    )?;
    Ok(report)
}

/// Train the conditional model against the coupling (or the unconditional
/// baseline on the targets alone).
pub fn cmd_fit_score(
    cfg: &ExperimentConfig,
    potentials_path: Option<&Path>,
    out: &Path,
    unconditional: bool,
) -> Result<PathBuf> {
    let dirs = OutDirs::create(out)?;
    let data = materialize(cfg)?;
    let dim = data.p_train.dim();
    let train_cfg = if unconditional {
        CdsmTrainConfig { seed: rng::sub_seed(cfg.seed, "score-uncond"), ..cfg.score.train.clone() }
    } else {
        cfg.score.train.clone()
    };
    let model = ScoreModel::init(cfg.score_arch(dim, !unconditional), train_cfg.seed)?;

    let trained = if unconditional {
        match cfg.data.mode {
            CouplingMode::Discrete => {
                cdsm::train_unconditional(model, &cfg.sde, &data.q_train, &train_cfg)?
            }
            CouplingMode::Continuous => {
                cdsm::train_unconditional(model, &cfg.sde, &data.q_src, &train_cfg)?
            }
        }
    } else {
        let path = potentials_path.ok_or_else(|| {
            Error::invalid("fit-score", "conditional training needs a potentials checkpoint")
        })?;
        let pair = PotentialPair::load(path)?;
        let expected = cfg.build_problem(cfg.ot.epsilon, &data.p_train, &data.q_train)?;
        pair.verify_mode(&expected)?;
        match cfg.data.mode {
            CouplingMode::Discrete => {
                let table = HTable::build(&pair, &data.p_train, &data.q_train, cfg.score.h_threshold)?;
                table.save(&dirs.checkpoints.join("htable.bin"))?;
                if !table.skipped.is_empty() {
                    eprintln!(
                        "note: {} of {} sources have no candidate target and are excluded",
                        table.skipped.len(),
                        table.n_sources()
                    );
                }
                let coupling =
                    CouplingSource::Discrete { p: &data.p_train, q: &data.q_train, table: &table };
                cdsm::train_conditional(model, &cfg.sde, &coupling, &train_cfg)?
            }
            CouplingMode::Continuous => {
                let coupling = CouplingSource::Continuous {
                    pp: &pair,
                    p: &data.p_src,
                    q: &data.q_src,
                    candidate_count: train_cfg.candidate_count,
                    retry_cap: train_cfg.retry_cap,
                };
                cdsm::train_conditional(model, &cfg.sde, &coupling, &train_cfg)?
            }
        }
    };

    let name = if unconditional { "score_unconditional.bin" } else { "score.bin" };
    let ckpt = dirs.checkpoints.join(name);
    trained.model.save(&ckpt, &trained.opt.ema, trained.opt.step, &cfg.sde)?;
    let log_name = if unconditional { "loss_unconditional.csv" } else { "loss.csv" };
    write_series_csv(&dirs.logs.join(log_name), "iteration,loss", &trained.log.losses)?;
    write_json(
        &dirs.metrics.join(if unconditional { "fit_score_unconditional.json" } else { "fit_score.json" }),
        &json!({
            "config": config_echo(cfg),
            "metrics": {
                "final_loss": trained.log.losses.last().map(|(_, l)| *l),
                "skipped_sources": trained.log.skipped_sources,
                "steps": trained.opt.step,
            }
        }),
    )?;
    Ok(ckpt)
}

/// Generate `eval.n_samples` samples per condition row and write them as
/// `sample_index,condition...,output...` CSV.
pub fn cmd_sample(
    cfg: &ExperimentConfig,
    model_path: &Path,
    conditions_csv: &Path,
    out: &Path,
    scones_potentials: Option<&Path>,
) -> Result<PathBuf> {
    let dirs = OutDirs::create(out)?;
    let conditions = EmpiricalMeasure::from_csv(conditions_csv, false)?;
    let (model, ema, _, sde) = ScoreModel::load(model_path)?;
    let frozen = model.with_params(ema);
    if conditions.dim() != frozen.arch.data_dim {
        return Err(Error::DimensionMismatch {
            expected: frozen.arch.data_dim,
            got: conditions.dim(),
        });
    }
    let n_per = cfg.eval.n_samples;
    let total = conditions.len() * n_per;
    let mut cond_rows = Array2::zeros((total, conditions.dim()));
    for (c, row) in conditions.coords_view().axis_iter(Axis(0)).enumerate() {
        for k in 0..n_per {
            cond_rows.row_mut(c * n_per + k).assign(&row);
        }
    }
    let samples = match scones_potentials {
        None => {
            let conds = frozen.arch.conditional.then_some(&cond_rows);
            sample_model(&frozen, &sde, conds, total, &cfg.sampler)?
        }
        Some(pot_path) => {
            let pair = PotentialPair::load(pot_path)?;
            sample_scones(&frozen, &pair, &sde, &cond_rows, &cfg.sampler)?
        }
    };

    let path = dirs.metrics.join("samples.csv");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let dim = conditions.dim();
    let mut header = String::from("sample_index");
    for d in 0..dim {
        header.push_str(&format!(",condition_{d}"));
    }
    for d in 0..samples.ncols() {
        header.push_str(&format!(",output_{d}"));
    }
    writeln!(f, "{header}")?;
    for i in 0..total {
        let mut line = format!("{i}");
        for v in cond_rows.row(i).iter() {
            line.push_str(&format!(",{v}"));
        }
        for v in samples.row(i).iter() {
            line.push_str(&format!(",{v}"));
        }
        writeln!(f, "{line}")?;
    }
    Ok(path)
}

/// Everything measured for one epsilon of the sweep.
#[derive(Debug, Clone, Serialize)]
pub struct EpsReport {
    pub epsilon: f64,
    pub otcs: ExpectedW2,
    pub scones: ExpectedW2,
    /// Summary of OTCS samples at the histogram condition.
    pub hist_sample_summary: GaussianSummary,
    /// Summary of the plan conditional at the histogram condition.
    pub hist_plan_summary: GaussianSummary,
    pub plan_row_violation: f64,
    pub plan_col_violation: f64,
    pub skipped_sources: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fig2Report {
    pub per_eps: Vec<EpsReport>,
}

/// The full sweep: per epsilon, fit potentials and the conditional model,
/// sample both methods at the probe conditions, and measure the expected
/// distance to the plan conditional. The unconditional baseline model is
/// shared across the sweep (it only depends on the targets).
pub fn run_fig2(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Fig2Report> {
    let dirs = out.map(OutDirs::create).transpose()?;
    let data = materialize(cfg)?;
    let dim = data.p_train.dim();
    if dim != 1 {
        return Err(Error::invalid("fig2", "the sweep is a 1-D experiment"));
    }

    // Shared unconditional baseline.
    let uncond_cfg = CdsmTrainConfig {
        seed: rng::sub_seed(cfg.seed, "score-uncond"),
        ..cfg.score.train.clone()
    };
    let uncond_model = ScoreModel::init(cfg.score_arch(dim, false), uncond_cfg.seed)?;
    let uncond = match cfg.data.mode {
        CouplingMode::Discrete => {
            cdsm::train_unconditional(uncond_model, &cfg.sde, &data.q_train, &uncond_cfg)?
        }
        CouplingMode::Continuous => {
            cdsm::train_unconditional(uncond_model, &cfg.sde, &data.q_src, &uncond_cfg)?
        }
    };
    let uncond_frozen = uncond.ema_model();

    // Probe conditions: quantile points of the source snapshot.
    let p_col = data.p_ref.coords_view().column(0).to_owned();
    let probes: Vec<Array1<f64>> = metrics::quantile_points(&p_col, cfg.eval.probes)
        .into_iter()
        .map(|v| ndarray::arr1(&[v]))
        .collect();

    let eval_seed = rng::sub_seed(cfg.seed, "eval");
    let mut per_eps = Vec::new();
    for &epsilon in &cfg.fig2_epsilons {
        let problem = cfg.build_problem(epsilon, &data.p_train, &data.q_train)?;
        let (pair, _ot_log) = train_potentials_for(cfg, &problem, &data)?;
        let est = pair.plan_estimate(&data.p_train, &data.q_ref)?;

        // Conditional model for this epsilon.
        let cond_model = ScoreModel::init(cfg.score_arch(dim, true), cfg.score.train.seed)?;
        let trained = match cfg.data.mode {
            CouplingMode::Discrete => {
                let table = HTable::build(&pair, &data.p_train, &data.q_train, cfg.score.h_threshold)?;
                let coupling =
                    CouplingSource::Discrete { p: &data.p_train, q: &data.q_train, table: &table };
                cdsm::train_conditional(cond_model, &cfg.sde, &coupling, &cfg.score.train)?
            }
            CouplingMode::Continuous => {
                let coupling = CouplingSource::Continuous {
                    pp: &pair,
                    p: &data.p_src,
                    q: &data.q_src,
                    candidate_count: cfg.score.train.candidate_count,
                    retry_cap: cfg.score.train.retry_cap,
                };
                cdsm::train_conditional(cond_model, &cfg.sde, &coupling, &cfg.score.train)?
            }
        };
        let frozen = trained.ema_model();

        // OTCS: conditional model through the reverse SDE.
        let sampler = cfg.sampler.clone();
        let mut gen_otcs = |x: ArrayView1<'_, f64>, n: usize, probe_seed: u64| {
            let conds = Array2::from_shape_fn((n, 1), |_| x[0]);
            let cfg_s = SamplerConfig { seed: eval_seed ^ probe_seed, ..sampler.clone() };
            sample_model(&frozen, &cfg.sde, Some(&conds), n, &cfg_s)
        };
        let otcs = expected_w2(&pair, &data.q_ref, &probes, cfg.eval.n_samples, &mut gen_otcs)?;

        // SCONES: unconditional model plus compatibility guidance.
        let scones_seed = rng::sub_seed(eval_seed, "scones");
        let mut gen_scones = |x: ArrayView1<'_, f64>, n: usize, probe_seed: u64| {
            let conds = Array2::from_shape_fn((n, 1), |_| x[0]);
            let cfg_s = SamplerConfig { seed: scones_seed ^ probe_seed, ..sampler.clone() };
            sample_scones(&uncond_frozen, &pair, &cfg.sde, &conds, &cfg_s)
        };
        let scones = expected_w2(&pair, &data.q_ref, &probes, cfg.eval.n_samples, &mut gen_scones)?;

        // Histograms at the reference condition.
        let x_hist = ndarray::arr1(&[cfg.eval.hist_condition]);
        let n_hist = cfg.eval.hist_samples;
        let hist_otcs = gen_otcs(x_hist.view(), n_hist, metrics::seed_from_coords(x_hist.view()))?;
        let hist_sample_summary = GaussianSummary::from_samples(&hist_otcs)?;
        let plan_density = conditional_plan_density(&pair, x_hist.view(), &data.q_ref)?;
        let hist_plan_summary =
            GaussianSummary::from_weighted(&data.q_ref.coords_view().to_owned(), plan_density.view())?;

        if let Some(dirs) = &dirs {
            let tag = format!("{epsilon:e}").replace(['+', '.'], "_");
            let otcs_col: Vec<f64> = hist_otcs.column(0).to_vec();
            let h = histogram(&otcs_col, cfg.eval.hist_bins, cfg.eval.hist_range)?;
            h.write_csv(&dirs.figures.join(format!("hist_otcs_eps{tag}.csv")))?;
            // Plan-density overlay rendered from categorical draws.
            let plan_draws = categorical_sampler(&data.q_ref, &plan_density, 20_000, eval_seed);
            let plan_col: Vec<f64> = plan_draws.column(0).to_vec();
            let ph = histogram(&plan_col, cfg.eval.hist_bins, cfg.eval.hist_range)?;
            let overlay: Vec<(f64, f64)> = ph
                .densities
                .iter()
                .enumerate()
                .map(|(i, d)| (0.5 * (ph.edges[i] + ph.edges[i + 1]), *d))
                .collect();
            h.write_svg(&dirs.figures.join(format!("hist_otcs_eps{tag}.svg")), Some(&overlay))?;

            let scones_hist =
                gen_scones(x_hist.view(), n_hist, metrics::seed_from_coords(x_hist.view()))?;
            let scones_col: Vec<f64> = scones_hist.column(0).to_vec();
            let sh = histogram(&scones_col, cfg.eval.hist_bins, cfg.eval.hist_range)?;
            sh.write_csv(&dirs.figures.join(format!("hist_scones_eps{tag}.csv")))?;
            sh.write_svg(&dirs.figures.join(format!("hist_scones_eps{tag}.svg")), Some(&overlay))?;
        }

        per_eps.push(EpsReport {
            epsilon,
            otcs,
            scones,
            hist_sample_summary,
            hist_plan_summary,
            plan_row_violation: est.row_violation,
            plan_col_violation: est.col_violation,
            skipped_sources: trained.log.skipped_sources,
        });
    }

    let report = Fig2Report { per_eps };
    if let Some(dirs) = &dirs {
        write_json(
            &dirs.metrics.join("fig2.json"),
            &json!({ "config": config_echo(cfg), "metrics": report }),
        )?;
    }
    Ok(report)
}

/// CLI wrapper for the sweep.
pub fn cmd_reproduce_fig2(cfg: &ExperimentConfig, out: &Path) -> Result<Fig2Report> {
    run_fig2(cfg, Some(out))
}
