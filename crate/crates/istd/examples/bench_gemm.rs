use ndarray::Array2;
use std::time::Instant;

fn main() {
    // conv-shaped GEMM: (32 x 288) * (288 x 4096), f32
    let a = Array2::<f32>::from_elem((32, 288), 0.5f32);
    let b = Array2::<f32>::from_elem((288, 4096), 0.25f32);
    let mut out = a.dot(&b);
    let t = Instant::now();
    let iters = 400;
    for _ in 0..iters {
        out = a.dot(&b);
    }
    let dt = t.elapsed().as_secs_f64();
    let flops = 2.0 * 32.0 * 288.0 * 4096.0 * iters as f64;
    println!("f32 GEMM: {:.2} GFLOPS (sink {})", flops / dt / 1e9, out[[0, 0]]);

    let a = Array2::<f64>::from_elem((32, 288), 0.5f64);
    let b = Array2::<f64>::from_elem((288, 4096), 0.25f64);
    let mut out = a.dot(&b);
    let t = Instant::now();
    for _ in 0..iters {
        out = a.dot(&b);
    }
    let dt = t.elapsed().as_secs_f64();
    println!("f64 GEMM: {:.2} GFLOPS (sink {})", flops / dt / 1e9, out[[0, 0]]);
}
