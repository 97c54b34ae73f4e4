use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use daod_bench::{detection_set, random_boxes};
use daod_core::detector::{init_params, nms, Detector, DetectorConfig};
use daod_core::evalmetrics::ap50;
use daod_core::Image;

fn bench_nms(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [50, 200, 1000] {
        let (boxes, scores) = random_boxes(n, 96.0, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| nms(black_box(&boxes), black_box(&scores), 0.7))
        });
    }
    group.finish();
}

fn bench_ap50(c: &mut Criterion) {
    let (preds, gts) = detection_set(100, 4, 3);
    c.bench_function("ap50/100x4", |b| b.iter(|| ap50(black_box(&preds), black_box(&gts), 2).unwrap()));
}

fn desk_detector() -> DetectorConfig {
    DetectorConfig {
        backbone_channels: vec![16, 16],
        feature_stride: 4,
        rpn_channels: 16,
        anchor_sizes: vec![12.0, 20.0],
        anchor_aspect_ratios: vec![1.0],
        pre_nms_proposals: 200,
        test_proposals: 32,
        roi_pool_size: 3,
        roi_hidden: 32,
        ..Default::default()
    }
}

fn bench_forward(c: &mut Criterion) {
    let cfg = desk_detector();
    let params = init_params(&cfg, 0).unwrap();
    let image = Image::filled(48, 48, 3, 0.5);
    let det = Detector::new(&cfg, &params).unwrap();
    c.bench_function("predict/48px", |b| b.iter(|| det.predict(black_box(&image)).unwrap()));
}

criterion_group!(benches, bench_nms, bench_ap50, bench_forward);
criterion_main!(benches);
