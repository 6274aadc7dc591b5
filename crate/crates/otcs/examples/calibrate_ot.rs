//! Convergence calibration for the dual potentials on the 1-D toy.
use otcs::data::{DataSource, GaussianGen};
use otcs::nn::Activation;
use otcs::ot::{CostKind, OtProblem};
use otcs::potentials::{train_potentials, PotentialTrainConfig};
use otcs::rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let eps: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let n_train: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2048);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-5);
    let chunk: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2500);
    let chunks: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(10);

    let p_src = DataSource::Gaussian(GaussianGen::new(vec![-4.0], 1.0).unwrap());
    let q_src = DataSource::Gaussian(GaussianGen::new(vec![4.0], 1.0).unwrap());
    let data_seed = rng::sub_seed(42, "data");
    let mut r0 = rng::stream(data_seed, "data", &[0]);
    let mut r1 = rng::stream(data_seed, "data", &[1]);
    let p = p_src.snapshot(&mut r0, n_train).unwrap();
    let q = q_src.snapshot(&mut r1, n_train).unwrap();
    let problem = OtProblem::unsupervised(CostKind::SquaredL2, eps).unwrap();

    println!("eps={eps} n={n_train} lr={lr}");
    // Re-train from scratch at increasing iteration counts (cheap enough,
    // and keeps the measurement identical to a real run).
    for k in 1..=chunks {
        let n_iter = k * chunk;
        let cfg = PotentialTrainConfig {
            learning_rate: lr,
            n_iter,
            seed: rng::sub_seed(42, "ot"),
            hidden: vec![1024],
            activation: Activation::Tanh,
            log_every: 0,
            ..Default::default()
        };
        let t0 = Instant::now();
        let (pair, log) = train_potentials(&problem, &p, &q, &cfg).unwrap();
        let est = pair.plan_estimate(&p, &q).unwrap();
        println!(
            "iters {:>6}: row {:.4} col {:.4} clamps {} [{:.1}s]",
            n_iter, est.row_violation, est.col_violation, log.clamp_events,
            t0.elapsed().as_secs_f64()
        );
        if est.row_violation < 0.04 && est.col_violation < 0.04 {
            break;
        }
    }
}
