//! Rough throughput numbers for the training/sampling hot paths.
use ndarray::{arr1, Array2};
use otcs::cdsm::{self, CouplingSource, CdsmTrainConfig};
use otcs::data::{GaussianGen, PointSampler};
use otcs::nn::Activation;
use otcs::ot::{CostKind, OtProblem};
use otcs::potentials::{PotentialPair, PotentialTrainConfig, train_potentials_with};
use otcs::samplers::{sample_model, SamplerConfig};
use otcs::score::{ScoreArchitecture, ScoreModel};
use otcs::sde::SdeSpec;
use std::time::Instant;

fn main() {
    // baseline: tanh / exp throughput
    let n = 1_000_000usize;
    let xs: Vec<f64> = (0..n).map(|i| (i as f64 / n as f64) * 4.0 - 2.0).collect();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for x in &xs { acc += x.tanh(); }
    println!("tanh: {:.1} ns/op (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for x in &xs { acc += (-x).exp(); }
    println!("exp:  {:.1} ns/op (acc {acc:.3})", t0.elapsed().as_nanos() as f64 / n as f64);

    // one dual-objective iteration
    let problem = OtProblem::unsupervised(CostKind::SquaredL2, 1e-4).unwrap();
    let pair = PotentialPair::init(problem.clone(), 1, 1, &[1024], Activation::Tanh, 0);
    let p = GaussianGen::new(vec![-4.0], 1.0).unwrap();
    let q = GaussianGen::new(vec![4.0], 1.0).unwrap();
    let mut r = otcs::rng::stream(0, "bench", &[]);
    let xs = p.sample_batch(&mut r, 256);
    let ys = q.sample_batch(&mut r, 256);
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let _ = pair.dual_objective_grad(xs.view(), ys.view(), true).unwrap();
    }
    println!("dual_objective_grad(B'=256, 1024): {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // potentials full train iteration (includes batch sampling + adam)
    let cfg = PotentialTrainConfig { n_iter: 50, seed: 1, learning_rate: 1e-5, ..Default::default() };
    let t0 = Instant::now();
    let _ = train_potentials_with(&problem, &p, &q, &cfg).unwrap();
    println!("train_potentials: {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 50.0);

    // one cdsm train iteration (toy arch, continuous, L=320)
    let sde = SdeSpec::default_ve();
    let arch = ScoreArchitecture::toy(1, true);
    let model = ScoreModel::init(arch, 2).unwrap();
    let tcfg = CdsmTrainConfig { n_iter: 20, seed: 3, ..Default::default() };
    let coupling = CouplingSource::Continuous { pp: &pair, p: &p, q: &q, candidate_count: 320, retry_cap: 8 };
    // lift potentials so H > 0 broadly (avoid retry storms for the bench)
    let mut pair2 = pair.clone();
    let nu = pair2.u_spec.param_count();
    pair2.omega[nu-1] += 1000.0;
    let coupling2 = CouplingSource::Continuous { pp: &pair2, p: &p, q: &q, candidate_count: 320, retry_cap: 8 };
    let t0 = Instant::now();
    let trained = cdsm::train_conditional(model, &sde, &coupling2, &tcfg).unwrap();
    println!("cdsm train (toy arch, B=32, L=320): {:.2} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 20.0);
    let _ = &coupling;

    // sampling throughput
    let frozen = trained.ema_model();
    let n_s = 256usize;
    let conds = Array2::from_shape_fn((n_s, 1), |_| -4.0);
    let scfg = SamplerConfig { n_steps: 100, seed: 9, ..Default::default() };
    let t0 = Instant::now();
    let _ = sample_model(&frozen, &sde, Some(&conds), n_s, &scfg).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("sampling: {:.2} us/sample-step ({} samples x 100 steps in {:.2}s)", dt * 1e6 / (n_s as f64 * 100.0), n_s, dt);
    let _ = arr1(&[0.0]);
}
