use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use taskmod::degradations::{generate_pairs, TaskSpec};
use taskmod::model::{TinyIpt, TinyIptConfig};
use taskmod::modulation::TaskId;
use taskmod::numerics::{matmul, svd, Tensor};
use taskmod::training::{train_step, OptimizerState, TrainableSet};

fn filled(rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::from_fn([rows, cols], |i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0)
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32, 64, 128] {
        let (a, b) = (filled(n, n), filled(n, n));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_svd(c: &mut Criterion) {
    let mut g = c.benchmark_group("svd");
    for (r, k) in [(16, 144), (48, 48), (96, 48)] {
        let w = filled(r, k).cast::<f64>();
        g.bench_with_input(BenchmarkId::from_parameter(format!("{r}x{k}")), &w, |bench, w| {
            bench.iter(|| svd(black_box(w)).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let spec = TaskSpec::denoise(25.0);
    let task = TaskId::from("denoise");
    let mut model = TinyIpt::<f32>::build(TinyIptConfig::default(), 0).unwrap();
    model.register_task(&task).unwrap();
    let batch = generate_pairs(&spec, 0, 4, 32, 32).unwrap();
    let mut opt = OptimizerState::new();
    c.bench_function("train_step/32x32x4", |bench| {
        bench.iter(|| {
            train_step(
                &mut model,
                &batch,
                TrainableSet::BackboneAndActiveTask,
                &mut opt,
                1e-4,
                None,
            )
            .unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_matmul, bench_svd, bench_train_step
}
criterion_main!(benches);
