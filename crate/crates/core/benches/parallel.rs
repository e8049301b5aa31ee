//! Sequential vs data-parallel execution of the hot loops: a training epoch,
//! attribution featurization and retraining-subset evaluation.

use std::hint::black_box;

use cadenza::attribution::{fit_attribution_index, score_targets, AttributionTarget, IndexConfig};
use cadenza::midi::{self, toy, VocabularyLayout};
use cadenza::model::{ModelCheckpoint, ModelConfig, TrainHyper, Trainer, TrainingExample};
use cadenza::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const WINDOW: usize = 32;

fn corpus() -> Vec<TrainingExample> {
    let layout = VocabularyLayout::default();
    let mut out = Vec::new();
    for (s, style) in toy::toy_styles().iter().enumerate() {
        let ev = midi::tokenize(&toy::piece(style, 200, s as u64), &layout);
        for (j, w) in midi::make_training_windows(&ev, WINDOW).unwrap().into_iter().take(4).enumerate() {
            out.push(TrainingExample { tokens: w, work_id: format!("s{s}w{j}") });
        }
    }
    out
}

fn trainer(exec: Exec, epochs: usize, seed: u64) -> Trainer {
    Trainer::new(
        ModelConfig { seed, ..ModelConfig::desk(WINDOW) },
        TrainHyper { epochs, learning_rate: 3e-3, exec, ..TrainHyper::default() },
    )
}

fn modes() -> Vec<(&'static str, Exec)> {
    #[allow(unused_mut)]
    let mut m = vec![("sequential", Exec::Sequential)];
    #[cfg(feature = "parallel")]
    m.push(("parallel", Exec::Parallel));
    m
}

fn bench_train(c: &mut Criterion) {
    let data = corpus();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in modes() {
        let t = trainer(exec, 1, 0);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(t.fit(&data, None).unwrap())));
    }
    group.finish();
}

fn bench_attribution(c: &mut Criterion) {
    let data = corpus();
    let members: Vec<ModelCheckpoint> = (0..2).map(|k| trainer(Exec::default(), 2, k).fit(&data, None).unwrap()).collect();
    let targets: Vec<AttributionTarget> = data
        .iter()
        .take(4)
        .map(|w| {
            let t = w.tokens.clone();
            AttributionTarget::segment(w.work_id.clone(), t.slice(0..16), t.slice(16..WINDOW)).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("attribution");
    group.sample_size(10);
    for (name, exec) in modes() {
        let config = IndexConfig { projection_dim: 128, exec, ..IndexConfig::default() };
        group.bench_function(BenchmarkId::new("fit_and_score", name), |b| {
            b.iter(|| {
                let index = fit_attribution_index(&data, &members, &config).unwrap();
                black_box(score_targets(&index, &targets).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_subsets(c: &mut Criterion) {
    let data = corpus();
    let t = trainer(Exec::Sequential, 1, 0);
    let masks: Vec<Vec<bool>> = (0..4).map(|s| (0..data.len()).map(|i| (i + s) % 2 == 0).collect()).collect();
    let mut group = c.benchmark_group("retrain_subsets");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(exec.map(&masks, |m| t.fit(&data, Some(m)).unwrap())))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train, bench_attribution, bench_subsets);
criterion_main!(benches);
