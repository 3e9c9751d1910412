//! Isolate raw GEMM throughput from end-to-end step cost.
use qatlab_core::tensor::matmul_rows;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a: Vec<f32> = (0..m * k).map(|i| (i % 13) as f32 * 0.1).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 * 0.1).collect();
    let _ = matmul_rows(&a, &b, m, k, n); // warm
    let t0 = Instant::now();
    for _ in 0..reps {
        let c = matmul_rows(&a, &b, m, k, n);
        std::hint::black_box(&c);
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    let gflops = 2.0 * (m * k * n) as f64 / dt / 1e9;
    println!("{m}x{k}x{n}: {:.2} ms  {gflops:.1} GFLOP/s", dt * 1e3);
}

fn main() {
    bench(512, 128, 128, 50);
    bench(512, 128, 344, 50);
    bench(512, 344, 128, 50);
    bench(512, 128, 259, 50);
    bench(128, 128, 128, 100);
}
