// temporary: kernel-level timings
fn main() {
    // dgemm [256,128]x[128,512]
    let (m, k, n) = (256usize, 128usize, 512usize);
    let a = vec![0.5f64; m * k];
    let b = vec![0.25f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let t = std::time::Instant::now();
    let iters = 200;
    for _ in 0..iters {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let gflops = (2.0 * m as f64 * k as f64 * n as f64 * iters as f64) / secs / 1e9;
    println!("dgemm 256x128x512: {gflops:.2} GFLOPS single-thread");

    // erf throughput
    let xs: Vec<f64> = (0..100_000).map(|i| (i as f64) / 50_000.0 - 1.0).collect();
    let t = std::time::Instant::now();
    let mut acc = 0.0;
    for _ in 0..20 {
        for &x in &xs {
            acc += libm::erf(x * std::f64::consts::FRAC_1_SQRT_2);
        }
    }
    let per = t.elapsed().as_secs_f64() / (20.0 * xs.len() as f64);
    println!("erf: {:.1} ns/call (acc {acc:.1})", per * 1e9);

    // exp throughput
    let t = std::time::Instant::now();
    let mut acc2 = 0.0;
    for _ in 0..20 {
        for &x in &xs {
            acc2 += (-0.5 * x * x as f64).exp();
        }
    }
    let per2 = t.elapsed().as_secs_f64() / (20.0 * xs.len() as f64);
    println!("exp: {:.1} ns/call (acc {acc2:.1})", per2 * 1e9);
}
