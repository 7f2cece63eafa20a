use candle_core::DType;
use criterion::{black_box, criterion_group, criterion_main, Criterion};

use priormotion::backbone::grids_to_tensor;
use priormotion::dataset::PredictionRecord;
use priormotion::grid::voxelize;
use priormotion::latent::{seeded_rng, SampleMode};
use priormotion::metrics::{evaluate_predictions, ReportOptions};
use priormotion::model::{ModelConfig, PriorMotion, Switches};
use priormotion_bench::{grids, scene};

fn bench_voxelize(c: &mut Criterion) {
    let (spec, g) = scene(1);
    let frame = g.points.current().to_vec();
    c.bench_function("voxelize_frame", |b| b.iter(|| voxelize(black_box(&frame), &spec)));
}

fn bench_metrics(c: &mut Criterion) {
    let (spec, g) = scene(2);
    let n = spec.cells();
    let pred = PredictionRecord {
        motion: vec![0.1; spec.output_steps() * n * 2],
        category_logits: vec![0.0; n * 5],
        state_logits: vec![0.0; n],
    };
    let preds = vec![pred; 4];
    let labels = vec![g.labels; 4];
    c.bench_function("evaluate_4_sequences", |b| {
        b.iter(|| evaluate_predictions(black_box(&preds), &labels, &spec, ReportOptions::default()).unwrap())
    });
}

fn bench_forward(c: &mut Criterion) {
    let (spec, frames) = grids(3);
    let x = grids_to_tensor(&[&frames], &spec, DType::F32).unwrap();
    let mut group = c.benchmark_group("predict");
    group.sample_size(10);
    for (name, switches) in [("baseline", Switches::baseline()), ("full", Switches::full())] {
        let cfg = ModelConfig { switches, ..ModelConfig::default() };
        let model = PriorMotion::new(cfg, spec.clone(), 0, DType::F32).unwrap();
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut rng = seeded_rng(0);
                model.predict(black_box(&x), SampleMode::Deterministic, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_voxelize, bench_metrics, bench_forward);
criterion_main!(benches);
