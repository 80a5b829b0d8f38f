use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kws_core::calib::{gamma, kappa};
use kws_core::channel::{simulate, ChannelConfig, SnrSpec};
use kws_core::dsp::{hfcc, log_mel};
use kws_core::dtw::{cost_matrix, multi_sample_scores, subsequence_ends, Recurrence};
use kws_core::fixtures::{make_world, ToyWorld, ToyWorldConfig, WorldLayout};
use kws_core::{AlignConfig, AudioBuffer, StepSizes};

fn world() -> ToyWorld {
    let cfg = ToyWorldConfig {
        noise_sigma: 0.1,
        ..ToyWorldConfig::default()
    };
    make_world(&cfg, &WorldLayout::default()).unwrap()
}

fn tone(seconds: f64) -> AudioBuffer {
    let n = (seconds * 16000.0) as usize;
    let x = (0..n)
        .map(|k| (0.5 * (2.0 * std::f64::consts::PI * 700.0 * k as f64 / 16000.0).sin()) as f32)
        .collect();
    AudioBuffer::new(x, 16000).unwrap()
}

fn dtw(c: &mut Criterion) {
    let w = world();
    let query = w.queries.values().next().unwrap()[0].normalize_rows().unwrap();
    let test = w.test.recordings[0].normalize_rows().unwrap();
    let cost = cost_matrix(&query, &test).unwrap();
    let steps = StepSizes::default();

    c.bench_function("cost_matrix", |b| b.iter(|| cost_matrix(black_box(&query), black_box(&test)).unwrap()));
    let mut g = c.benchmark_group("subsequence_ends");
    for (name, rec) in [("exact", Recurrence::Exact), ("greedy", Recurrence::Greedy)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &rec, |b, &rec| {
            b.iter(|| subsequence_ends(black_box(&cost), &steps, rec).unwrap())
        });
    }
    g.finish();

    let shots: Vec<_> = w.queries.values().next().unwrap().iter().map(|q| q.normalize_rows().unwrap()).collect();
    let cfg = AlignConfig::default();
    c.bench_function("multi_sample_scores", |b| b.iter(|| multi_sample_scores(&shots, black_box(&test), &cfg).unwrap()));
}

fn calibration(c: &mut Criterion) {
    let w = world();
    let test = w.test.recordings[0].normalize_rows().unwrap();
    c.bench_function("kappa", |b| b.iter(|| kappa(black_box(&test), &w.bank).unwrap()));
    c.bench_function("gamma", |b| b.iter(|| gamma(black_box(&test), &w.bank).unwrap()));
}

fn audio(c: &mut Criterion) {
    let x = tone(1.0);
    c.bench_function("log_mel_1s", |b| b.iter(|| log_mel(black_box(&x)).unwrap()));
    c.bench_function("hfcc_1s", |b| b.iter(|| hfcc(black_box(&x)).unwrap()));
    let cfg = ChannelConfig::default();
    c.bench_function("channel_1s", |b| b.iter(|| simulate(black_box(&x), &cfg, SnrSpec::new(6.0)).unwrap()));
}

criterion_group!(benches, dtw, calibration, audio);
criterion_main!(benches);
