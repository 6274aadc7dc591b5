//! GEMM path comparison.
use ndarray::{Array2};
use std::time::Instant;

fn main() {
    for (m, k, n) in [(32usize, 512usize, 512usize), (256, 1, 1024), (256, 1024, 1), (512, 512, 512)] {
        let a = Array2::<f64>::from_elem((m, k), 0.5);
        let w = Array2::<f64>::from_elem((n, k), 0.25); // stored (out, in)
        let reps = (2_000_000_00 / (2*m*k*n)).max(2);
        // path 1: a.dot(&w.t())
        let t0 = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps { let y = a.dot(&w.t()); acc += y[[0,0]]; }
        let dt1 = t0.elapsed().as_secs_f64() / reps as f64;
        // path 2: precomputed transpose (standard layout)
        let wt = w.t().to_owned();
        let t0 = Instant::now();
        for _ in 0..reps { let y = a.dot(&wt); acc += y[[0,0]]; }
        let dt2 = t0.elapsed().as_secs_f64() / reps as f64;
        let flops = (2*m*k*n) as f64;
        println!("({m}x{k})x({k}x{n}): view.t() {:.2} GFLOPS, owned {:.2} GFLOPS  (acc {acc:.1})",
                 flops/dt1/1e9, flops/dt2/1e9);
    }
}
