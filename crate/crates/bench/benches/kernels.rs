use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use shrink_bench::random_matrix;
use shrink_core::quant::{quantize_rtn, quantized_matmul_nt};
use shrink_core::quantizer::{awq_search, QuantConfig};

fn bench_quantize_rtn(c: &mut Criterion) {
    let mut g = c.benchmark_group("quantize_rtn");
    for &(rows, cols) in &[(256usize, 256usize), (256, 1024)] {
        let w = random_matrix(rows, cols, 1);
        g.throughput(Throughput::Elements((rows * cols) as u64));
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{rows}x{cols}")),
            &w,
            |b, w| b.iter(|| quantize_rtn(w, 4, 64).unwrap()),
        );
    }
    g.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let x = random_matrix(64, 256, 2);
    let w = random_matrix(256, 256, 3);
    let q = quantize_rtn(&w, 4, 64).unwrap();

    let mut g = c.benchmark_group("matmul_64x256x256");
    let flops = (64 * 256 * 256 * 2) as u64;
    g.throughput(Throughput::Elements(flops));
    g.bench_function("dense_nt", |b| b.iter(|| x.matmul_nt(&w).unwrap()));
    g.bench_function("quantized_nt", |b| {
        b.iter(|| quantized_matmul_nt(&x, &q).unwrap())
    });
    g.bench_function("dequantize_then_nt", |b| {
        b.iter(|| x.matmul_nt(&q.dequantize()).unwrap())
    });
    g.finish();
}

fn bench_awq_search(c: &mut Criterion) {
    let w = random_matrix(128, 128, 4);
    let x = random_matrix(256, 128, 5);
    let mean_abs: Vec<f32> = (0..128)
        .map(|j| {
            let mut s = 0.0f64;
            for i in 0..x.rows() {
                s += x.get(i, j).abs() as f64;
            }
            ((s / x.rows() as f64) as f32).max(1e-6)
        })
        .collect();
    let cfg = QuantConfig {
        alpha_grid: 8,
        ..QuantConfig::default()
    };
    c.bench_function("awq_search_128x128_grid8", |b| {
        b.iter(|| awq_search("bench", &w, &x, &mean_abs, &cfg).unwrap())
    });
}

criterion_group!(benches, bench_quantize_rtn, bench_matmul, bench_awq_search);
criterion_main!(benches);
