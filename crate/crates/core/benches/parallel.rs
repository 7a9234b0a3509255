//! Sequential (one worker) against full-pool execution of the data-parallel
//! hot paths: one training epoch and Monte Carlo Bayesian inference.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cloudcast::dataset::{split, ResourceSelector, SplitBundle, SplitOptions};
use cloudcast::models::{build_model, predict_samples, train, ModelConfig, ModelKind, TrainOptions, TrainedModel};
use cloudcast::par;
use cloudcast::synth::{generate_trace, SynthSpec};

fn bundle() -> SplitBundle {
    let series = generate_trace(&SynthSpec {
        length: 2000,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec");
    split(&series, &ResourceSelector::Univariate("cpu".into()), SplitOptions::default()).expect("long enough")
}

fn one_epoch() -> TrainOptions {
    TrainOptions {
        max_epochs: 1,
        ..TrainOptions::default()
    }
}

fn hbnn(b: &SplitBundle) -> TrainedModel {
    let m = build_model(&ModelConfig::tiny(ModelKind::BayesianLastLayer, 1), 288).expect("valid config");
    train(&m, &b.train, &b.val, &one_epoch()).expect("training runs")
}

fn thread_counts() -> Vec<usize> {
    let full = par::current_threads();
    if full > 1 {
        vec![1, full]
    } else {
        vec![1]
    }
}

fn training_epoch(c: &mut Criterion) {
    let b = bundle();
    let model = build_model(&ModelConfig::tiny(ModelKind::Distributional, 1), 288).expect("valid config");
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bench, &t| {
            bench.iter(|| par::with_threads(t, || train(&model, &b.train, &b.val, &one_epoch()).expect("trains")))
        });
    }
    group.finish();
}

fn bayesian_inference(c: &mut Criterion) {
    let b = bundle();
    let model = hbnn(&b);
    let inputs = &b.test[..64.min(b.test.len())];
    let mut group = c.benchmark_group("hbnn_predict_64");
    group.sample_size(10);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bench, &t| {
            bench.iter(|| par::with_threads(t, || predict_samples(&model, inputs).expect("predicts")))
        });
    }
    group.finish();
}

criterion_group!(benches, training_epoch, bayesian_inference);
criterion_main!(benches);
