use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use shrink_bench::bench_model;
use shrink_core::quantizer::{quantize_model, QuantConfig, QuantMethod};
use shrink_core::tokenizer;

fn bench_forward(c: &mut Criterion) {
    let model = bench_model();
    let tokens = tokenizer::encode("What is the capital of France? The capital of France is Paris.");
    let mut g = c.benchmark_group("forward");
    g.throughput(Throughput::Elements(tokens.len() as u64));
    g.bench_function("dense_64_tok", |b| b.iter(|| model.forward(&tokens).unwrap()));

    let cfg = QuantConfig {
        method: QuantMethod::Rtn,
        ..QuantConfig::default()
    };
    let (quantized, _) = quantize_model(&model, None, &cfg).unwrap();
    g.bench_function("quantized_64_tok", |b| {
        b.iter(|| quantized.forward(&tokens).unwrap())
    });
    g.finish();
}

fn bench_generate(c: &mut Criterion) {
    let model = bench_model();
    let prompt = tokenizer::encode("Q: What is two plus two? A:");
    let mut g = c.benchmark_group("generate_greedy");
    g.throughput(Throughput::Elements(16));
    g.bench_function("dense_16_new", |b| {
        b.iter(|| model.generate_greedy(&prompt, 16, false).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_forward, bench_generate);
criterion_main!(benches);
