//! Hot-path benchmarks comparing the rayon data-parallel execution with the
//! sequential fallback.
//!
//! With the default `parallel` feature each group reports a `parallel` and
//! a `sequential` timing in one run (the sequential arm forces the fallback
//! path). Building with `--no-default-features` benches the true
//! sequential-only configuration, comparable across runs via criterion
//! baselines.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use histolens::augment::AugmentPipeline;
use histolens::datakit::{self, synth, ClassName, TaskId};
use histolens::exec;
use histolens::explain;
use histolens::network::{build_model, Model, ModelConfig};
use histolens::tensor::Tensor;
use histolens::trainer::{self, Adam, TrainConfig};

struct Fixture {
    model: Model,
    split: datakit::DatasetSplit,
    pipeline: AugmentPipeline,
    input: Tensor,
    _dir: tempfile::TempDir,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    synth::synth_generate(
        dir.path(),
        24,
        32,
        7,
        &[ClassName::ColonAca, ClassName::ColonN],
    )
    .expect("synth");
    let inventory = datakit::scan_dataset(dir.path()).expect("scan");
    let split = datakit::build_split(&inventory, TaskId::Colon, 7).expect("split");
    let model = build_model(&ModelConfig::tiny_vgg(32, 7)).expect("model");
    Fixture {
        model,
        split,
        pipeline: AugmentPipeline::baseline(32, 7),
        input: Tensor::filled(vec![1, 3, 32, 32], 0.4),
        _dir: dir,
    }
}

/// One optimizer step over the training partition: per-item forward and
/// backward on independent tapes, fixed-order reduction, Adam update.
fn one_train_epoch(fx: &Fixture) {
    let mut model = build_model(&ModelConfig::tiny_vgg(32, 7)).expect("model");
    let mut config = TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 7,
        ..TrainConfig::default()
    };
    config.shuffle = false;
    let history =
        trainer::train(&mut model, &fx.split, Some(&fx.pipeline), &config).expect("train");
    black_box(history);
}

fn bench_pair(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        group.bench_function("parallel", |b| b.iter(&mut f));
        group.bench_function("sequential", |b| {
            b.iter(|| exec::with_sequential(&mut f))
        });
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function("sequential", |b| b.iter(&mut f));
    group.finish();
}

fn train_epoch_bench(c: &mut Criterion) {
    let fx = fixture();
    bench_pair(c, "train_epoch", || one_train_epoch(&fx));
}

fn eval_scores_bench(c: &mut Criterion) {
    let fx = fixture();
    let crop = AugmentPipeline::crop_only(32);
    bench_pair(c, "eval_scores", || {
        let out = trainer::evaluate_scores(&fx.model, &fx.split.train, &crop).expect("eval");
        black_box(out);
    });
}

fn smoothgrad_bench(c: &mut Criterion) {
    let fx = fixture();
    bench_pair(c, "smoothgrad_n32", || {
        let map = explain::smoothgrad(&fx.model, &fx.input, 1, 32, 0.15, 3).expect("smoothgrad");
        black_box(map);
    });
}

fn augment_batch_bench(c: &mut Criterion) {
    let fx = fixture();
    let draws: Vec<u64> = (0..fx.split.train.len() as u64).collect();
    bench_pair(c, "load_batch_augmented", || {
        let out = datakit::load_batch(&fx.split.train, &fx.pipeline, Some(&draws)).expect("load");
        black_box(out);
    });
}

fn adam_step_bench(c: &mut Criterion) {
    // Single-threaded numeric kernel; included for a profile baseline.
    let mut model = build_model(&ModelConfig::tiny_vgg(32, 7)).expect("model");
    let config = TrainConfig::default();
    let mut adam = Adam::new(&config);
    let grads: std::collections::BTreeMap<String, Tensor> = model
        .param_ids()
        .into_iter()
        .map(|id| {
            let shape = model.param(&id).unwrap().shape().to_vec();
            (id, Tensor::filled(shape, 1e-3))
        })
        .collect();
    c.bench_function("adam_step", |b| {
        b.iter(|| adam.step(&mut model, black_box(&grads)).expect("step"))
    });
}

criterion_group!(
    benches,
    train_epoch_bench,
    eval_scores_bench,
    smoothgrad_bench,
    augment_batch_bench,
    adam_step_bench
);
criterion_main!(benches);
