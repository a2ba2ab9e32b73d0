use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use xfields::gradcore::kernels::{bilinear_forward, conv2d_forward};

fn ramp(n: usize) -> Vec<f32> {
    (0..n).map(|i| ((i * 37) % 101) as f32 / 101.0).collect()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for &(size, cin, cout) in &[(16, 64, 32), (64, 18, 16), (128, 16, 16)] {
        let input = ramp(size * size * cin);
        let kernel = ramp(9 * cin * cout);
        let bias = vec![0.0f32; cout];
        let mut out = vec![0.0f32; size * size * cout];
        group.bench_function(BenchmarkId::from_parameter(format!("{size}x{size}x{cin}->{cout}")), |b| {
            b.iter(|| {
                conv2d_forward(black_box(&input), &kernel, &bias, size, size, cin, cout, 3, &mut out);
            })
        });
    }
    group.finish();
}

fn warp(c: &mut Criterion) {
    let mut group = c.benchmark_group("bilinear_warp");
    for &size in &[64usize, 256] {
        let image = ramp(size * size * 3);
        let positions: Vec<f32> = (0..size * size)
            .flat_map(|i| [(i % size) as f32 + 3.3, (i / size) as f32 - 1.7])
            .collect();
        let mut out = vec![0.0f32; size * size * 3];
        group.bench_function(BenchmarkId::from_parameter(size), |b| {
            b.iter(|| bilinear_forward(black_box(&image), size, size, 3, &positions, &mut out))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, warp);
criterion_main!(benches);
