//! Sequential vs rayon execution of the batch-level loops.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mednca::data::{generate_sample, SynthSpec};
use mednca::par::Execution;
use mednca::perturb::{PerturbKind, PerturbSpec};
use mednca::pipeline::train_step_with;
use mednca::trainer::dice_per_image;
use mednca::{harness, MedNcaModel, NcaConfig, TrainSample};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn setup(size: usize, count: usize) -> (MedNcaModel<f32>, Vec<TrainSample<f32>>) {
    let cfg = NcaConfig { n: 16, h: 64, steps: 16, ..Default::default() };
    let model = MedNcaModel::new(cfg, 4, 0).unwrap();
    let spec = SynthSpec { height: size, width: size, ..Default::default() };
    (model, (0..count).map(|i| generate_sample(&spec, i)).collect())
}

fn train_step(c: &mut Criterion) {
    let (model, batch) = setup(64, 8);
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_step_with(exec, black_box(&model), &batch, 1).unwrap())
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let (model, samples) = setup(64, 8);
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("{i:05}")).collect();
    let template = PerturbSpec::new(PerturbKind::Scale, 1.0);
    let mut g = c.benchmark_group("inference");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("dice_per_image", name), &exec, |b, &exec| {
            b.iter(|| dice_per_image(exec, black_box(&model), &samples, 0).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("scale_sweep", name), &exec, |b, &exec| {
            b.iter(|| harness::sweep(exec, &model, &ids, &samples, template, &[0.8, 1.0, 1.2], 0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, train_step, inference);
criterion_main!(benches);
