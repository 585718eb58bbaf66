//! Data-parallel map against the sequential baseline on the two hot loops:
//! per-example gradients of a training batch and independent sampling chains.
//!
//! Build with `--no-default-features` to make `parallel::map` sequential too.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use paradiff::denoiser::{Cond, DenoiserConfig, DenoiserModel};
use paradiff::parallel;
use paradiff::rng::{randn, seeded, substream};
use paradiff::sampler::{sample, SamplerConfig};
use paradiff::schedule::NoiseSchedule;
use paradiff::tensor::{Graph, Mat};

fn model() -> DenoiserModel {
    let cfg = DenoiserConfig { layers: 2, heads: 4, width: 32, max_len: 16, ..Default::default() };
    DenoiserModel::init(cfg, &mut seeded(1)).unwrap()
}

fn items(n: usize) -> Vec<(Mat, Mat, Mat, usize)> {
    let mut r = seeded(2);
    (0..n).map(|i| (randn(&mut r, 16, 32), randn(&mut r, 16, 32), randn(&mut r, 16, 32), 1 + 61 * i % 1000)).collect()
}

fn batch_gradients(c: &mut Criterion) {
    let m = model();
    let batch = items(16);
    let grad = |(z, src, target, t): &(Mat, Mat, Mat, usize)| {
        let mut g = Graph::new(&[m.params().tag()]);
        let zv = g.constant_ref(z);
        let cv = g.constant_ref(src);
        let pred = m.net().forward(&mut g, m.params(), zv, Some(cv), *t);
        let loss = g.mse(pred, target.clone());
        g.backward(loss, m.params())
    };
    let mut group = c.benchmark_group("batch_gradients_16");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("map", parallel::is_parallel()), |b| b.iter(|| parallel::map(&batch, grad)));
    group.bench_function("map_seq", |b| b.iter(|| parallel::map_seq(&batch, grad)));
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let m = model();
    let schedule = NoiseSchedule::cosine(1000, 0.008, 0.999).unwrap();
    let cfg = SamplerConfig::dpm(10);
    let sources: Vec<(usize, Mat)> = items(8).into_iter().enumerate().map(|(i, it)| (i, it.1)).collect();
    let chain = |(i, src): &(usize, Mat)| sample(&m, Cond::source(src), &schedule, &cfg, &mut substream(3, *i as u64)).unwrap();
    let mut group = c.benchmark_group("dpm10_chains_8");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("map", parallel::is_parallel()), |b| b.iter(|| parallel::map(&sources, chain)));
    group.bench_function("map_seq", |b| b.iter(|| parallel::map_seq(&sources, chain)));
    group.finish();
}

criterion_group!(benches, batch_gradients, sampling);
criterion_main!(benches);
