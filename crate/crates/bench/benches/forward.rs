use criterion::{criterion_group, criterion_main, Criterion};
use infoq_bench::fixture;
use infoq_core::{apply_config, calibrate_activation_ranges, evaluate_accuracy, BitConfig, Network};

fn forward(c: &mut Criterion) {
    let (model, data) = fixture(512);
    let ranges = calibrate_activation_ranges(&model, data.inputs()).unwrap();
    let cfg = BitConfig::uniform(model.quantizable(), 4);
    let view = apply_config(&model, &cfg, &ranges).unwrap();
    let mut g = c.benchmark_group("forward");
    g.sample_size(20);
    g.bench_function("float/512", |b| b.iter(|| model.logits(data.inputs()).unwrap()));
    g.bench_function("w4a4/512", |b| b.iter(|| view.logits(data.inputs()).unwrap()));
    g.bench_function("apply_config", |b| b.iter(|| apply_config(&model, &cfg, &ranges).unwrap()));
    g.bench_function("evaluate_accuracy/512", |b| {
        b.iter(|| evaluate_accuracy(&model, &cfg, &ranges, &data).unwrap())
    });
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
