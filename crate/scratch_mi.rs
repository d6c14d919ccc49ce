// scratch check, not part of the build
use orderlab_core::mi::{gaussian_bench, GaussianBenchConfig};

fn main() {
    let cfg = GaussianBenchConfig::default();
    let t0 = std::time::Instant::now();
    for rho in [0.0, 0.5, 0.9] {
        for seed in [1u64, 2, 3] {
            let row = gaussian_bench(rho, &cfg, seed).unwrap();
            println!(
                "rho={:.1} seed={} true={:.4} lower={:.4} upper={:.4}  (lower-true={:+.4}, upper-true={:+.4})",
                row.rho, seed, row.true_mi, row.lower, row.upper,
                row.lower - row.true_mi, row.upper - row.true_mi
            );
        }
    }
    println!("elapsed: {:.1?}", t0.elapsed());
}
