use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use meir_core::analysis::{modality_importance, planted_signal_samples, roc_auc, ForestConfig};
use meir_core::config::RunConfig;
use meir_core::model::{Model, PairLabels, PairRef};
use meir_core::nn::ParamSet;
use meir_core::pipeline::{synth_dataset, Featurized};
use meir_core::Modality;

fn corpus() -> Featurized {
    let mut cfg = RunConfig::default();
    cfg.synth.clusters = 120;
    let (_, data) = synth_dataset(&cfg.seeded()).unwrap();
    data.featurize().unwrap()
}

fn retrieval(c: &mut Criterion) {
    let f = corpus();
    let q = &f.test[0].bundle;
    c.bench_function("retrieval/top1_all_modalities", |b| {
        b.iter(|| f.index.top1(black_box(q), &Modality::ALL).unwrap())
    });
    c.bench_function("retrieval/top10_image", |b| {
        b.iter(|| f.index.retrieve_top_k(black_box(q), &[Modality::Image], 10).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let f = corpus();
    let model = Model::new(RunConfig::default().model).unwrap();
    let retrieved: Vec<_> = f
        .test
        .iter()
        .take(32)
        .map(|q| &f.index.entry(f.index.top1(&q.bundle, &Modality::ALL).unwrap()).bundle)
        .collect();
    let batch: Vec<PairRef<'_>> = f
        .test
        .iter()
        .zip(&retrieved)
        .map(|(q, r)| PairRef {
            query: &q.bundle,
            retrieved: Some(r),
            labels: PairLabels {
                integrity: q.label,
                relationship: true,
                manipulation: q.label,
            },
        })
        .collect();
    c.bench_function("model/forward_one", |b| {
        b.iter(|| model.forward(black_box(batch[0].query), batch[0].retrieved).unwrap())
    });
    let mut grads = model.params.zeros_like();
    c.bench_function("model/loss_and_grad_batch32", |b| {
        b.iter(|| model.loss_and_grad(black_box(&batch), &mut grads).unwrap())
    });
}

fn forest(c: &mut Criterion) {
    let samples = planted_signal_samples(300, Modality::Text, 96, 64, 3.0, 1);
    let mut g = c.benchmark_group("forest");
    g.sample_size(10);
    g.bench_function("importance_one_trial_l16", |b| {
        b.iter(|| modality_importance(black_box(&samples), 16, 1, ForestConfig::default(), 0).unwrap())
    });
    g.finish();
}

fn auc(c: &mut Criterion) {
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect();
    let labels: Vec<bool> = (0..n).map(|i| (i * 31) % 3 == 0).collect();
    c.bench_function("auc/10k", |b| b.iter(|| roc_auc(black_box(&scores), &labels).unwrap()));
}

criterion_group!(benches, retrieval, model, forest, auc);
criterion_main!(benches);
