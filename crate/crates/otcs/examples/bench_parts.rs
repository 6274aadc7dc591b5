//! Isolate cdsm iteration parts.
use ndarray::Array2;
use otcs::cdsm::{batch_loss_grad, WeightMode};
use otcs::data::{GaussianGen, PointSampler};
use otcs::nn::Activation;
use otcs::ot::{CostKind, OtProblem};
use otcs::potentials::PotentialPair;
use otcs::score::{ScoreArchitecture, ScoreModel};
use otcs::sde::SdeSpec;
use std::time::Instant;

fn main() {
    let sde = SdeSpec::default_ve();
    let model = ScoreModel::init(ScoreArchitecture::toy(1, true), 2).unwrap();
    let b = 32;
    let xs = Array2::from_elem((b, 1), -4.0);
    let ys = Array2::from_elem((b, 1), 4.0);
    let ts: Vec<f64> = (0..b).map(|i| 0.01 + 0.98 * i as f64 / b as f64).collect();
    let noises = Array2::from_elem((b, 1), 0.3);
    let mut grad = vec![0.0; model.param_count()];
    // loss+grad alone
    let reps = 50;
    let t0 = Instant::now();
    for _ in 0..reps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let _ = batch_loss_grad(&model, &sde, Some(&xs), &ys, &ts, &noises, WeightMode::SigmaSquared, Some(&mut grad)).unwrap();
    }
    println!("batch_loss_grad: {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);
    // forward only
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model.forward_batch(&ys, Some(&xs), &ts).unwrap();
    }
    println!("forward_batch:   {:.1} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // grad zeroing cost
    let t0 = Instant::now();
    for _ in 0..1000 { grad.iter_mut().for_each(|g| *g = 0.0); }
    println!("grad zero:       {:.3} ms ({} params)", t0.elapsed().as_secs_f64(), model.param_count());

    // H eval against 320 candidates
    let problem = OtProblem::unsupervised(CostKind::SquaredL2, 1e-4).unwrap();
    let mut pair = PotentialPair::init(problem, 1, 1, &[1024], Activation::Tanh, 0);
    let nu = pair.u_spec.param_count();
    pair.omega[nu-1] += 1000.0;
    let q = GaussianGen::new(vec![4.0], 1.0).unwrap();
    let mut r = otcs::rng::stream(0, "bench", &[]);
    let cands = q.sample_batch(&mut r, 320);
    let x = ndarray::arr1(&[-4.0]);
    let t0 = Instant::now();
    for _ in 0..(reps*32) {
        let _ = pair.compatibility_against(x.view(), cands.view()).unwrap();
    }
    println!("H vs 320 cands:  {:.2} ms per slot x32 = {:.1} ms/batch", t0.elapsed().as_secs_f64()*1000.0/(reps*32) as f64, t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // rng derivation cost
    let t0 = Instant::now();
    for i in 0..100_000u64 {
        let _ = otcs::rng::stream(7, "score/noise", &[i, 3]);
    }
    println!("stream derive:   {:.2} ns", t0.elapsed().as_secs_f64()*1e9/1e5);
}
