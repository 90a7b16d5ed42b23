use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tipqc_core::curator::{fold, standardize, ImageRecord, StandardizeMode};
use tipqc_core::fixtures::{render, sample_specs, Style};
use tipqc_core::gate::{histogram, otsu_threshold, quality_score, GateConfig};
use tipqc_core::raster::to_gray;
use tipqc_core::router::decide;
use tipqc_core::scorer::{class_weights, cb_loss_and_grad_features, confidence, FeatureConfig};
use tipqc_core::{EventKind, Manifest, RoutingConfig};

fn frame() -> GrayImage {
    let spec = &sample_specs(1, 1.0, Style::RealStyle, 4).unwrap()[0];
    to_gray(&render(spec).unwrap().image)
}

fn gate(c: &mut Criterion) {
    let img = frame();
    let cfg = GateConfig::default();
    c.bench_function("gate/quality_score", |b| b.iter(|| quality_score(black_box(&img), &cfg).unwrap()));
    let h = histogram(&img);
    c.bench_function("gate/otsu", |b| b.iter(|| otsu_threshold(black_box(&h)).unwrap()));
}

fn scorer(c: &mut Criterion) {
    let img = frame();
    let feats = FeatureConfig::default();
    c.bench_function("scorer/extract_80x32", |b| b.iter(|| feats.extract(black_box(&img)).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = feats.dim();
    let xs: Vec<Vec<f64>> = (0..256).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<u8> = (0..256).map(|i| (i % 2) as u8).collect();
    let w = vec![0.01; d];
    let weights = class_weights(128, 128, 0.999).unwrap().normalized();
    c.bench_function("scorer/loss_and_grad_256", |b| {
        b.iter(|| cb_loss_and_grad_features(black_box(&w), 0.0, &xs, &ys, &weights, 1e-4).unwrap())
    });
}

fn standardization(c: &mut Criterion) {
    let small = GrayImage::from_fn(300, 800, |x, y| Luma([(x ^ y) as u8]));
    c.bench_function("standardize/300x800", |b| b.iter(|| standardize(black_box(&small), StandardizeMode::Upscale).unwrap()));
}

fn manifest(c: &mut Criterion) {
    let mut m = Manifest::in_memory(0, 0);
    let cfg = RoutingConfig::default();
    for i in 0..2000u64 {
        let f = (i % 100) as f64 / 100.0;
        let mut r = ImageRecord::real(format!("r{i}"), format!("r{i}.png"), "00", i);
        r.f = Some(f);
        r.c = Some(confidence(f));
        r.route = Some(decide(0.8, f, &cfg, i));
        m.commit(i + 1, EventKind::Ingested { record: Box::new(r), routing: Some(cfg), consistency: None }).unwrap();
    }
    let events = tipqc_core::curator::parse_events(m.memory_log().unwrap()).unwrap();
    c.bench_function("manifest/fold_2000", |b| b.iter(|| fold(black_box(&events)).unwrap()));
    c.bench_function("manifest/stats_2000", |b| b.iter(|| m.state().stats(black_box(10_000))));
}

criterion_group!(benches, gate, scorer, standardization, manifest);
criterion_main!(benches);
