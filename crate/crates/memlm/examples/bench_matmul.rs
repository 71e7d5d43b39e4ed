use memlm::numerics::kernels::matmul_acc;
use std::time::Instant;
fn main() {
    for (m, k, n) in [(64usize, 64usize, 64usize), (64, 64, 256), (140, 64, 512)] {
        let a = vec![1.001f32; m * k];
        let b = vec![0.999f32; k * n];
        let mut c = vec![0.0f32; m * n];
        let reps = (2e9 / (m * k * n) as f64) as usize;
        let t0 = Instant::now();
        for _ in 0..reps { matmul_acc(&a, &b, &mut c, m, k, n); }
        let el = t0.elapsed().as_secs_f64();
        let gflops = 2.0 * (m * k * n * reps) as f64 / el / 1e9;
        println!("{}x{}x{}: {:.2} GFLOP/s", m, k, n, gflops);
    }
}
