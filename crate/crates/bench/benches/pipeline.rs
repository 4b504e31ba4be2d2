use bilagrid::grid::{self, BilateralGrid, GridDims};
use bilagrid::isp;
use bilagrid::metrics;
use bilagrid::model::{self, ModelConfig, ModelParams};
use bilagrid::train;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn slicing(c: &mut Criterion) {
    let dims = GridDims::new(16, 16, 8).unwrap();
    let mut grid = BilateralGrid::identity(dims).unwrap();
    grid.params_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i % 7) as f64 * 1e-3);
    let mut group = c.benchmark_group("slice_affine");
    for size in [64, 256] {
        let img = isp::synth_scene(1, 1, size, size).unwrap().remove(0);
        group.bench_with_input(BenchmarkId::from_parameter(size), &img, |b, img| {
            b.iter(|| grid::slice_affine(black_box(&grid), black_box(img)).unwrap())
        });
    }
    group.finish();
}

fn model_passes(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(cfg, 0).unwrap();
    let frames = isp::synth_scene(2, 10, 64, 64).unwrap();
    let pair = isp::generate_training_pair(&frames, 3, 0.7).unwrap();
    c.bench_function("harmonize_10_frames_desk", |b| {
        b.iter(|| model::harmonize_sequence(&params, pair.reference(), pair.sources()).unwrap())
    });
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("loss_and_grad_10_frames_desk", |b| {
        b.iter(|| train::batch_loss_and_grad(&params, black_box(&pair), 0.1, 1e-3).unwrap())
    });
    group.finish();
}

fn quality_metrics(c: &mut Criterion) {
    let frames = isp::synth_scene(4, 2, 256, 256).unwrap();
    c.bench_function("psnr_256", |b| b.iter(|| metrics::psnr(&frames[0], &frames[1]).unwrap()));
    c.bench_function("ssim_256", |b| b.iter(|| metrics::ssim(&frames[0], &frames[1]).unwrap()));
}

criterion_group!(benches, slicing, model_passes, quality_metrics);
criterion_main!(benches);
