use criterion::{criterion_group, criterion_main, Criterion};
use dcl_bench::{images, latents, untrained_source};
use dcl_core::adapt::{adapt, AdaptationConfig, Method};
use dcl_core::metrics::{frechet_feature_distance, intra_lpips, PairBudget};
use dcl_core::models::ModelConfig;
use std::hint::black_box;

fn networks(c: &mut Criterion) {
    let config = ModelConfig::default();
    let src = untrained_source(&config, 0);
    let z = latents(32, &config, 1);
    c.bench_function("generator/forward-32", |b| b.iter(|| src.generator.generate(black_box(&z), 32).unwrap()));
}

fn iterations(c: &mut Criterion) {
    let config = ModelConfig::default();
    let src = untrained_source(&config, 0);
    let shots = images(10, &config, 2);
    let mut group = c.benchmark_group("adapt-10-iterations");
    group.sample_size(10);
    for method in [Method::Tgan, Method::Cdc, Method::Dcl] {
        let cfg = AdaptationConfig { method, iterations: 10, probe_interval: 10, proxy_size: 16, ..Default::default() };
        group.bench_function(method.name(), |b| b.iter(|| adapt(&cfg, &src, &shots).unwrap()));
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let config = ModelConfig::default();
    let src = untrained_source(&config, 0);
    let generated = images(256, &config, 3);
    let shots = images(10, &config, 4);
    let mut group = c.benchmark_group("metrics");
    group.sample_size(10);
    group.bench_function("intra-lpips-256", |b| {
        b.iter(|| intra_lpips(&generated, &shots, PairBudget::default(), &src.feat_net, 0).unwrap())
    });
    group.bench_function("frechet-256", |b| {
        b.iter(|| frechet_feature_distance(&generated, &shots, &src.feat_net).unwrap())
    });
    group.finish();
}

criterion_group!(benches, networks, iterations, metrics);
criterion_main!(benches);
