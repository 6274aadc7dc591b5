//! Experiment configuration: a flat, human-readable key-value format with
//! dotted section names.
//!
//! ```text
//! # one key per line, `#` starts a comment
//! seed = 7
//! data.p.kind = gaussian
//! data.p.mean = -4
//! data.p.std = 1
//! ot.epsilon = 1e-4
//! ```
//!
//! One config drives one experiment; sweeps are explicit lists (for example
//! `fig2.epsilons`). Validation happens before any work starts and reports
//! every violated field at once. Unknown keys are rejected so typos cannot
//! silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::cdsm::{CdsmTrainConfig, WeightMode, DEFAULT_H_THRESHOLD};
use crate::data::{DataSource, GaussianGen, MixtureGen};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::ot::{CostKind, EmpiricalMeasure, KeypointSet, OtMode, OtProblem};
use crate::potentials::PotentialTrainConfig;
use crate::samplers::{InitScheme, SamplerConfig, SamplerMethod};
use crate::score::ScoreArchitecture;
use crate::sde::SdeSpec;

/// Whether training couples finite datasets or continuous generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    Discrete,
    Continuous,
}

/// One side of the data section.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    Gaussian { mean: Vec<f64>, std: f64 },
    Mixture { components: Vec<(Vec<f64>, f64)>, weights: Vec<f64> },
    Csv { path: PathBuf, weights_column: bool },
}

#[derive(Debug, Clone)]
pub struct DataSection {
    pub mode: CouplingMode,
    pub p: SourceSpec,
    pub q: SourceSpec,
    /// Snapshot size for discrete training and for evaluation references.
    pub n_train: usize,
    /// Keypoint index pairs (discrete semi-supervised only).
    pub keypoints: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct OtSection {
    pub mode: OtMode,
    pub cost: CostKind,
    pub epsilon: f64,
    pub tau: f64,
    pub train: PotentialTrainConfig,
}

#[derive(Debug, Clone)]
pub struct ScoreSection {
    pub hidden: usize,
    pub n_hidden: usize,
    pub fourier_dim: usize,
    pub fourier_scale: f64,
    pub zero_init_output: bool,
    pub h_threshold: f64,
    pub train: CdsmTrainConfig,
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub probes: usize,
    pub n_samples: usize,
    /// Size of the empirical target snapshot the plan conditional is
    /// summarized on.
    pub reference_target_count: usize,
    pub hist_bins: usize,
    pub hist_range: (f64, f64),
    pub hist_condition: f64,
    /// Samples drawn for histogram figures (more than `n_samples` since bins
    /// need filling).
    pub hist_samples: usize,
}

/// A fully parsed and validated experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub ot: OtSection,
    pub sde: SdeSpec,
    pub score: ScoreSection,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub fig2_epsilons: Vec<f64>,
    /// Tolerance handed to the exact discrete solver.
    pub oracle_tol: f64,
    /// Resolved key-value pairs, echoed into metrics output.
    pub raw: BTreeMap<String, String>,
}

/// Key-value accessor that records violations instead of failing fast.
struct Reader {
    map: BTreeMap<String, String>,
    used: std::collections::BTreeSet<String>,
    violations: Vec<String>,
}

impl Reader {
    fn get(&mut self, key: &str) -> Option<String> {
        let v = self.map.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    fn violation(&mut self, key: &str, msg: impl std::fmt::Display) {
        self.violations.push(format!("{key}: {msg}"));
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, default: T) -> T {
        match self.get(key) {
            None => default,
            Some(raw) => match raw.parse::<T>() {
                Ok(v) => v,
                Err(_) => {
                    self.violation(key, format!("cannot parse `{raw}`"));
                    default
                }
            },
        }
    }

    fn parse_required<T: std::str::FromStr + Default>(&mut self, key: &str) -> T {
        match self.get(key) {
            None => {
                self.violation(key, "missing required key");
                T::default()
            }
            Some(raw) => match raw.parse::<T>() {
                Ok(v) => v,
                Err(_) => {
                    self.violation(key, format!("cannot parse `{raw}`"));
                    T::default()
                }
            },
        }
    }

    fn parse_list(&mut self, key: &str, default: Vec<f64>) -> Vec<f64> {
        match self.get(key) {
            None => default,
            Some(raw) => {
                let parsed: std::result::Result<Vec<f64>, _> =
                    raw.split(',').map(|f| f.trim().parse::<f64>()).collect();
                match parsed {
                    Ok(v) if !v.is_empty() => v,
                    _ => {
                        self.violation(key, format!("cannot parse list `{raw}`"));
                        default
                    }
                }
            }
        }
    }

    fn parse_usize_list(&mut self, key: &str, default: Vec<usize>) -> Vec<usize> {
        match self.get(key) {
            None => default,
            Some(raw) => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    raw.split(',').map(|f| f.trim().parse::<usize>()).collect();
                match parsed {
                    Ok(v) if !v.is_empty() => v,
                    _ => {
                        self.violation(key, format!("cannot parse list `{raw}`"));
                        default
                    }
                }
            }
        }
    }

    fn parse_bool(&mut self, key: &str, default: bool) -> bool {
        match self.get(key).as_deref() {
            None => default,
            Some("true") | Some("1") => true,
            Some("false") | Some("0") => false,
            Some(other) => {
                self.violation(key, format!("expected true/false, got `{other}`"));
                default
            }
        }
    }
}

/// Parse the flat text format into raw pairs.
pub fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: format!("line {}: expected `key = value`", lineno + 1),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Parse {
                path: origin.to_string(),
                message: format!("line {}: duplicate key `{key}`", lineno + 1),
            });
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text, &path.display().to_string())
    }

    pub fn from_str(text: &str, origin: &str) -> Result<Self> {
        let map = parse_pairs(text, origin)?;
        Self::from_pairs(map)
    }

    pub fn from_pairs(map: BTreeMap<String, String>) -> Result<Self> {
        let raw = map.clone();
        let mut r = Reader { map, used: Default::default(), violations: Vec::new() };

        let seed: u64 = r.parse("seed", 0);

        // data section
        let mode = match r.get("data.mode").as_deref() {
            None | Some("discrete") => CouplingMode::Discrete,
            Some("continuous") => CouplingMode::Continuous,
            Some(other) => {
                r.violation("data.mode", format!("expected discrete|continuous, got `{other}`"));
                CouplingMode::Discrete
            }
        };
        let side = |r: &mut Reader, side: &str| -> SourceSpec {
            let prefix = format!("data.{side}");
            match r.get(&format!("{prefix}.kind")).as_deref() {
                Some("gaussian") | None => {
                    let mean = r.parse_list(&format!("{prefix}.mean"), vec![0.0]);
                    let std = r.parse(&format!("{prefix}.std"), 1.0);
                    if !(std > 0.0) {
                        r.violation(&format!("{prefix}.std"), "must be > 0");
                    }
                    SourceSpec::Gaussian { mean, std }
                }
                Some("mixture") => {
                    let raw_comps = r.get(&format!("{prefix}.components")).unwrap_or_default();
                    let mut components = Vec::new();
                    for chunk in raw_comps.split(';') {
                        let vals: std::result::Result<Vec<f64>, _> =
                            chunk.split(',').map(|v| v.trim().parse::<f64>()).collect();
                        match vals {
                            Ok(v) if v.len() >= 2 => {
                                let (mean, std) = v.split_at(v.len() - 1);
                                components.push((mean.to_vec(), std[0]));
                            }
                            _ => r.violation(
                                &format!("{prefix}.components"),
                                "each `;`-separated component needs `mean...,std`",
                            ),
                        }
                    }
                    let k = components.len().max(1);
                    let weights = r.parse_list(
                        &format!("{prefix}.weights"),
                        vec![1.0 / k as f64; k],
                    );
                    SourceSpec::Mixture { components, weights }
                }
                Some("csv") => {
                    let path = r.get(&format!("{prefix}.path")).unwrap_or_else(|| {
                        r.violation(&format!("{prefix}.path"), "missing path for csv source");
                        String::new()
                    });
                    let weights_column = r.parse_bool(&format!("{prefix}.weights_column"), false);
                    SourceSpec::Csv { path: PathBuf::from(path), weights_column }
                }
                Some(other) => {
                    r.violation(
                        &format!("{prefix}.kind"),
                        format!("expected gaussian|mixture|csv, got `{other}`"),
                    );
                    SourceSpec::Gaussian { mean: vec![0.0], std: 1.0 }
                }
            }
        };
        let p_spec = side(&mut r, "p");
        let q_spec = side(&mut r, "q");
        let n_train = r.parse("data.n_train", 256usize);
        if n_train == 0 {
            r.violation("data.n_train", "must be >= 1");
        }
        let keypoints = r.get("data.keypoints").map(PathBuf::from);

        // ot section
        let ot_mode = match r.get("ot.mode").as_deref() {
            None | Some("unsupervised") => OtMode::Unsupervised,
            Some("semi_supervised") => OtMode::SemiSupervised,
            Some(other) => {
                r.violation("ot.mode", format!("expected unsupervised|semi_supervised, got `{other}`"));
                OtMode::Unsupervised
            }
        };
        let cost = match r.get("ot.cost").as_deref() {
            None | Some("squared_l2") => CostKind::SquaredL2,
            Some("mean_squared_l2") => CostKind::MeanSquaredL2,
            Some(other) => {
                r.violation("ot.cost", format!("unknown cost `{other}`"));
                CostKind::SquaredL2
            }
        };
        let epsilon: f64 = r.parse_required("ot.epsilon");
        if !(epsilon > 0.0) {
            r.violation("ot.epsilon", "must be > 0");
        }
        let tau = r.parse("ot.tau", 0.1);
        if !(tau > 0.0) {
            r.violation("ot.tau", "must be > 0");
        }
        let activation = match r.get("ot.activation").as_deref() {
            None | Some("tanh") => Activation::Tanh,
            Some("silu") => Activation::Silu,
            Some(other) => {
                r.violation("ot.activation", format!("expected tanh|silu, got `{other}`"));
                Activation::Tanh
            }
        };
        let lr_final = r.get("ot.lr_final").map(|raw| match raw.parse::<f64>() {
            Ok(v) => v,
            Err(_) => {
                r.violation("ot.lr_final", format!("cannot parse `{raw}`"));
                1e-6
            }
        });
        let ot_train = PotentialTrainConfig {
            learning_rate: r.parse("ot.lr", 1e-5),
            lr_final,
            batch_size: r.parse("ot.batch_size", 256usize),
            n_iter: r.parse("ot.n_iter", 10_000usize),
            seed: crate::rng::sub_seed(seed, "ot"),
            hidden: r.parse_usize_list("ot.hidden", vec![1024]),
            activation,
            log_every: r.parse("ot.log_every", 100usize),
            monitor_every: r.parse("ot.monitor_every", 0usize),
            monitor_points: r.parse("ot.monitor_points", 128usize),
        };
        if !(ot_train.learning_rate > 0.0) {
            r.violation("ot.lr", "must be > 0");
        }
        if ot_train.batch_size == 0 {
            r.violation("ot.batch_size", "must be >= 1");
        }
        if ot_mode == OtMode::SemiSupervised {
            if keypoints.is_none() {
                r.violation("data.keypoints", "semi-supervised OT needs a keypoint file");
            }
            if mode == CouplingMode::Continuous {
                r.violation("data.mode", "semi-supervised OT needs discrete datasets");
            }
        }

        // sde section
        let sde = match r.get("sde.kind").as_deref() {
            None | Some("ve") => {
                let alpha = r.parse("sde.alpha", 25.0);
                if !(alpha > 1.0) {
                    r.violation("sde.alpha", "VE requires alpha > 1");
                    SdeSpec::default_ve()
                } else {
                    SdeSpec::Ve { alpha }
                }
            }
            Some("vp") => {
                let beta_min = r.parse("sde.beta_min", 0.1);
                let beta_max = r.parse("sde.beta_max", 20.0);
                if !(beta_min > 0.0 && beta_max > beta_min) {
                    r.violation("sde.beta_min", "VP requires 0 < beta_min < beta_max");
                    SdeSpec::default_vp()
                } else {
                    SdeSpec::Vp { beta_min, beta_max }
                }
            }
            Some(other) => {
                r.violation("sde.kind", format!("expected ve|vp, got `{other}`"));
                SdeSpec::default_ve()
            }
        };

        // score section
        let batch_size = r.parse("score.batch_size", 32usize);
        let weight_mode = match r.get("score.weight_mode").as_deref() {
            None | Some("sigma_squared") => WeightMode::SigmaSquared,
            Some("diffusion_squared") => WeightMode::DiffusionSquared,
            Some(other) => {
                r.violation("score.weight_mode", format!("unknown mode `{other}`"));
                WeightMode::SigmaSquared
            }
        };
        let score = ScoreSection {
            hidden: r.parse("score.hidden", 512usize),
            n_hidden: r.parse("score.n_hidden", 2usize),
            fourier_dim: r.parse("score.fourier_dim", 256usize),
            fourier_scale: r.parse("score.fourier_scale", 16.0),
            zero_init_output: r.parse_bool("score.zero_init_output", true),
            h_threshold: r.parse("score.h_threshold", DEFAULT_H_THRESHOLD),
            train: CdsmTrainConfig {
                batch_size,
                candidate_count: r.parse("score.candidate_count", 10 * batch_size.max(1)),
                n_iter: r.parse("score.n_iter", 2000usize),
                learning_rate: r.parse("score.lr", 1e-4),
                weight_mode,
                seed: crate::rng::sub_seed(seed, "score"),
                log_every: r.parse("score.log_every", 100usize),
                retry_cap: r.parse("score.retry_cap", 8usize),
            },
        };
        if score.hidden == 0 {
            r.violation("score.hidden", "must be >= 1");
        }
        if score.fourier_dim == 0 || score.fourier_dim % 2 != 0 {
            r.violation("score.fourier_dim", "must be a positive even number");
        }
        if !(score.train.learning_rate > 0.0) {
            r.violation("score.lr", "must be > 0");
        }
        if score.train.batch_size == 0 {
            r.violation("score.batch_size", "must be >= 1");
        }

        // sampler section
        let method = match r.get("sampler.method").as_deref() {
            None | Some("euler_maruyama") | Some("em") => SamplerMethod::EulerMaruyama,
            Some("predictor_corrector") | Some("pc") => SamplerMethod::PredictorCorrector,
            Some(other) => {
                r.violation("sampler.method", format!("unknown method `{other}`"));
                SamplerMethod::EulerMaruyama
            }
        };
        let init = match r.get("sampler.init").as_deref() {
            None | Some("prior") => InitScheme::Prior,
            Some(raw) if raw.starts_with("noisy:") => {
                match raw.trim_start_matches("noisy:").parse::<f64>() {
                    Ok(m) if m > 0.0 && m <= 1.0 => InitScheme::NoisyAtM(m),
                    _ => {
                        r.violation("sampler.init", "noisy:<M> needs M in (0, 1]");
                        InitScheme::Prior
                    }
                }
            }
            Some(other) => {
                r.violation("sampler.init", format!("expected prior or noisy:<M>, got `{other}`"));
                InitScheme::Prior
            }
        };
        let sampler = SamplerConfig {
            method,
            n_steps: r.parse("sampler.n_steps", 1000usize),
            corrector_snr: r.parse("sampler.snr", 0.16),
            init,
            seed: crate::rng::sub_seed(seed, "sample"),
        };
        if sampler.n_steps == 0 {
            r.violation("sampler.n_steps", "must be >= 1");
        }
        if sampler.corrector_snr < 0.0 {
            r.violation("sampler.snr", "must be >= 0");
        }

        // eval section
        let hist_min = r.parse("eval.hist_min", 0.0);
        let hist_max = r.parse("eval.hist_max", 8.0);
        let eval = EvalSection {
            probes: r.parse("eval.probes", 64usize),
            n_samples: r.parse("eval.n_samples", 256usize),
            reference_target_count: r.parse("eval.reference_target_count", 512usize),
            hist_bins: r.parse("eval.hist_bins", 50usize),
            hist_range: (hist_min, hist_max),
            hist_condition: r.parse("eval.hist_condition", -4.0),
            hist_samples: r.parse("eval.hist_samples", 2000usize),
        };
        if eval.probes == 0 {
            r.violation("eval.probes", "must be >= 1");
        }
        if eval.n_samples < 2 {
            r.violation("eval.n_samples", "must be >= 2");
        }
        if !(hist_max > hist_min) {
            r.violation("eval.hist_max", "must exceed eval.hist_min");
        }

        let fig2_epsilons = r.parse_list("fig2.epsilons", vec![1e-1, 1e-2, 1e-3, 1e-4]);
        if fig2_epsilons.iter().any(|e| *e <= 0.0) {
            r.violation("fig2.epsilons", "every epsilon must be > 0");
        }

        let oracle_tol = r.parse("oracle.tol", 1e-6);
        if !(oracle_tol > 0.0) {
            r.violation("oracle.tol", "must be > 0");
        }

        // unknown keys
        let unknown: Vec<String> =
            r.map.keys().filter(|k| !r.used.contains(*k)).cloned().collect();
        for k in unknown {
            r.violations.push(format!("{k}: unknown key"));
        }

        if !r.violations.is_empty() {
            return Err(Error::ConfigValidation { fields: r.violations });
        }

        Ok(ExperimentConfig {
            seed,
            data: DataSection { mode, p: p_spec, q: q_spec, n_train, keypoints },
            ot: OtSection { mode: ot_mode, cost, epsilon, tau, train: ot_train },
            sde,
            score,
            sampler,
            eval,
            fig2_epsilons,
            oracle_tol,
            raw,
        })
    }

    /// Instantiate one side of the data section.
    pub fn build_source(&self, spec: &SourceSpec) -> Result<DataSource> {
        match spec {
            SourceSpec::Gaussian { mean, std } => {
                Ok(DataSource::Gaussian(GaussianGen::new(mean.clone(), *std)?))
            }
            SourceSpec::Mixture { components, weights } => {
                let comps: Result<Vec<GaussianGen>> = components
                    .iter()
                    .map(|(mean, std)| GaussianGen::new(mean.clone(), *std))
                    .collect();
                Ok(DataSource::Mixture(MixtureGen::new(comps?, weights.clone())?))
            }
            SourceSpec::Csv { path, weights_column } => {
                Ok(DataSource::Empirical(EmpiricalMeasure::from_csv(path, *weights_column)?))
            }
        }
    }

    /// Build the transport problem; semi-supervised mode resolves the
    /// keypoint file against the provided snapshots.
    pub fn build_problem(
        &self,
        epsilon: f64,
        p: &EmpiricalMeasure,
        q: &EmpiricalMeasure,
    ) -> Result<OtProblem> {
        match self.ot.mode {
            OtMode::Unsupervised => {
                let mut problem = OtProblem::unsupervised(self.ot.cost, epsilon)?;
                problem.tau = self.ot.tau;
                Ok(problem)
            }
            OtMode::SemiSupervised => {
                let path = self.data.keypoints.as_ref().expect("validated at load time");
                let pairs = KeypointSet::load_index_pairs(path)?;
                let kp = KeypointSet::from_indices(p, q, &pairs)?;
                OtProblem::semi_supervised(self.ot.cost, epsilon, self.ot.tau, kp)
            }
        }
    }

    /// Score architecture for a given data dimension.
    pub fn score_arch(&self, data_dim: usize, conditional: bool) -> ScoreArchitecture {
        ScoreArchitecture {
            data_dim,
            hidden: self.score.hidden,
            n_hidden: self.score.n_hidden,
            fourier_dim: self.score.fourier_dim,
            fourier_scale: self.score.fourier_scale,
            conditional,
            zero_init_output: self.score.zero_init_output,
        }
    }
}
