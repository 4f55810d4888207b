use bifusion_bench::{fixture, forward, forward_backward};
use bifusion_core::harness::synth::random_chain;
use bifusion_core::protein::build_graph;
use bifusion_core::rng::stream;
use bifusion_core::{FusionMode, Level};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    for mode in FusionMode::ALL {
        let f = fixture(mode, 64, Level::Backbone).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(mode), &f, |b, f| {
            b.iter(|| forward(f).unwrap())
        });
    }
    group.finish();
}

fn model_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    for mode in FusionMode::ALL {
        let f = fixture(mode, 64, Level::Backbone).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(mode), &f, |b, f| {
            b.iter(|| forward_backward(f).unwrap())
        });
    }
    group.finish();
}

fn graph_construction(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_graph");
    for len in [64, 256] {
        let s = random_chain("bench", len, &mut stream(3, &[]));
        group.bench_with_input(BenchmarkId::from_parameter(len), &s, |b, s| {
            b.iter(|| build_graph(s, 10.0, Level::AllAtom).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, model_forward, model_backward, graph_construction);
criterion_main!(benches);
