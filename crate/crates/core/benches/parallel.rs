use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tacoformer::preprocess::synth::{synth_generate, Coupling, SynthSpec};
use tacoformer::trainer::{batch_backprop, evaluate, ArchConfig};
use tacoformer::Execution;

fn backprop(c: &mut Criterion) {
    let set = synth_generate(&SynthSpec::new(64, Coupling::Both, 0.5, 0).with_shape(16, 8)).unwrap();
    let arch = ArchConfig {
        d_model: 32,
        heads: 4,
        layers: 1,
        zero_init_classifier: false,
        ..ArchConfig::default()
    };
    let model = arch.model_for(&set).unwrap();
    let params = model.init_params(0);
    let idx: Vec<usize> = (0..set.len()).collect();

    let mut group = c.benchmark_group("batch_backprop_64");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        if exec == Execution::Parallel && !Execution::is_parallel_available() {
            continue;
        }
        group.bench_with_input(BenchmarkId::from_parameter(exec), &exec, |b, &exec| {
            b.iter(|| batch_backprop(&model, &params, &set, &idx, exec, 8).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("evaluate_64");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        if exec == Execution::Parallel && !Execution::is_parallel_available() {
            continue;
        }
        group.bench_with_input(BenchmarkId::from_parameter(exec), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &params, &set, exec, 8).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, backprop);
criterion_main!(benches);
