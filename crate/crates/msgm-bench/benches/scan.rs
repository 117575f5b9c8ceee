use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use msgm_core::tensor::scan_forward;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bench_scan_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    let (b, di, ds) = (4, 64, 16);
    for &n in &[256usize, 512, 1024, 2048] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u: Vec<f64> = (0..b * n * di).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let delta: Vec<f64> = (0..b * n * di).map(|_| rng.gen_range(0.01..1.0)).collect();
        let a: Vec<f64> = (0..di * ds).map(|_| -rng.gen_range(0.1..2.0f64).exp()).collect();
        let bs: Vec<f64> = (0..b * n * ds).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cs: Vec<f64> = (0..b * n * ds).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..di).map(|_| rng.gen_range(-1.0..1.0)).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &_n| {
            bench.iter(|| {
                let (y, _) = scan_forward(&u, &delta, &a, &bs, &cs, &d, b, n, di, ds, false);
                std::hint::black_box(y)
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_scan_scaling);
criterion_main!(benches);
