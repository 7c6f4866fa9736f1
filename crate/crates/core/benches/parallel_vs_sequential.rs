//! Rayon data-parallel core against the sequential fallback, on a training
//! step, a batched forward pass and a full in-distribution evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unibrain::config::RunConfig;
use unibrain::dataset::{Dataset, Split};
use unibrain::eval;
use unibrain::nn::Mode;
use unibrain::par;
use unibrain::trainer::{self, Trainer};

fn setup() -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::desk();
    cfg.data.subjects = 4;
    cfg.data.samples_per_subject = 200;
    cfg.data.test_fraction = 0.2;
    cfg.sync_teacher();
    let ds = Dataset::generate(&cfg.data).expect("dataset");
    (cfg, ds)
}

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn bench(c: &mut Criterion) {
    let (cfg, ds) = setup();
    let refs: Vec<_> = ds.sample_refs(None, Split::Train).into_iter().take(cfg.train.batch_size).collect();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for (name, sequential) in MODES {
        par::set_sequential(sequential);
        let mut t = Trainer::new(&cfg, &ds).expect("trainer");
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| t.step_on(&refs).expect("step")));
    }
    group.finish();

    let model = trainer::TrainedModel::untrained(&cfg, &ds).expect("model");
    let mut plans = eval::plans_for(&ds, cfg.model.groups, cfg.model.group_size).expect("plans");
    let (input, _) = trainer::build_batch(&ds, &mut plans, &refs).expect("batch");
    let mut group = c.benchmark_group("forward");
    for (name, sequential) in MODES {
        par::set_sequential(sequential);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| model.model.net.forward(&input, Mode::Eval).expect("forward"))
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, sequential) in MODES {
        par::set_sequential(sequential);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| eval::run_in_distribution(&model, &ds, &cfg.eval).expect("eval"))
        });
    }
    group.finish();
    par::set_sequential(false);
}

criterion_group!(benches, bench);
criterion_main!(benches);
