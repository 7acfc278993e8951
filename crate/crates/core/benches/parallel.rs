//! Rayon pool against a single worker on the data-parallel hot paths. Build
//! with `--no-default-features` to time the sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use orsp::data::{generate, SyntheticConfig};
use orsp::domain::{ModelConfig, Scanpath, Trial};
use orsp::metrics::{evaluate, random_scanpaths, MetricConfig};
use orsp::model::{prepare_all, Model};
use orsp::par;
use orsp::training::{evaluate_losses, train, TrainConfig};

const POOLS: [(&str, Option<usize>); 2] = [("pool", None), ("single", Some(1))];

fn trials(n: usize) -> Vec<Trial> {
    generate(&SyntheticConfig {
        n_trials: n,
        seed: 7,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn model_config() -> ModelConfig {
    ModelConfig {
        d_ctx: 32,
        d_hist: 16,
        d_mlp: 32,
        d_emb: 16,
        d_img: 16,
        vocab_size: 32,
        ..ModelConfig::default()
    }
}

fn bench_generate(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_200");
    for (name, threads) in POOLS {
        let cfg = SyntheticConfig {
            n_trials: 200,
            seed: 7,
            ..SyntheticConfig::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || generate(&cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let data = trials(200);
    let ids: Vec<String> = data.iter().map(|t| t.trial_id.clone()).collect();
    let gts: Vec<Scanpath> = data.iter().map(|t| t.gt_scanpath.clone()).collect();
    let preds = random_scanpaths(&gts, 7);
    let cfg = MetricConfig::default();
    let mut group = c.benchmark_group("evaluate_200");
    for (name, threads) in POOLS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || evaluate(&ids, &preds, &gts, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_losses(c: &mut Criterion) {
    let cfg = model_config();
    let set = prepare_all(&trials(64), cfg.lp).unwrap();
    let model = Model::new(cfg, 7).unwrap();
    let mut group = c.benchmark_group("forward_losses_64");
    for (name, threads) in POOLS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || evaluate_losses(&model, &set).unwrap()))
        });
    }
    group.finish();
}

fn bench_train(c: &mut Criterion) {
    let cfg = model_config();
    let set = prepare_all(&trials(64), cfg.lp).unwrap();
    let train_cfg = TrainConfig {
        epochs: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("train_epoch_64");
    group.sample_size(10);
    for (name, threads) in POOLS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_threads(threads, || train(&set, None, &cfg, &train_cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generate, bench_metrics, bench_losses, bench_train);
criterion_main!(benches);
