use ndarray::Array2;
use otcs::nn::{mlp_forward_cached, mlp_backward, Activation, MlpSpec};
use std::time::Instant;

fn main() {
    let spec = MlpSpec::new(&[1, 1024, 1], Activation::Tanh);
    let mut r = otcs::rng::stream(0, "b", &[]);
    let params = spec.init_params(&mut r);
    let x = Array2::from_elem((256, 1), 0.5);
    let reps = 200;

    let t0 = Instant::now();
    for _ in 0..reps { let _ = mlp_forward_cached(&spec, &params, &x, false); }
    println!("forward keep=false: {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = mlp_forward_cached(&spec, &params, &x, true); }
    println!("forward keep=true:  {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    let (_, cache) = mlp_forward_cached(&spec, &params, &x, true);
    let d_out = Array2::from_elem((256, 1), 1.0);
    let mut grad = vec![0.0; params.len()];
    let t0 = Instant::now();
    for _ in 0..reps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let _ = mlp_backward(&spec, &params, &cache, &d_out, Some(&mut grad));
    }
    println!("backward:           {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // raw tanh on same volume
    let mut z: Array2<f64> = Array2::from_elem((256, 1024), 0.5);
    let t0 = Instant::now();
    for _ in 0..reps { z.mapv_inplace(|v| v.tanh()); }
    println!("raw tanh 256x1024:  {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);

    // bias add via row iter
    let b = vec![0.1f64; 1024];
    let t0 = Instant::now();
    for _ in 0..reps {
        for mut row in z.rows_mut() {
            for (v, bj) in row.iter_mut().zip(&b) { *v += bj; }
        }
    }
    println!("bias add rows:      {:.2} ms", t0.elapsed().as_secs_f64()*1000.0/reps as f64);
}
