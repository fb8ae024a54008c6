use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use plantseg::baseline::nn::Tensor;
use plantseg::baseline::{Unet, UnetConfig};
use plantseg::encoder::extract;
use plantseg::maskops::{coarse_mask, components};
use plantseg::pca::{self, FitOptions};
use plantseg::preprocess::{apply_geometry, plan_geometry};
use plantseg::refiner::TrivialRefiner;
use plantseg::{classify, iou, segment_image, synth, Connectivity, SegmentOptions, SyntheticEncoder, TokenGrid};

const H: usize = 420;
const W: usize = 560;

fn grids(n: u64) -> Vec<TokenGrid> {
    let mut enc = SyntheticEncoder::new(0);
    (0..n)
        .map(|seed| {
            let scene = synth::blob_scene(H, W, seed);
            let spec = plan_geometry(H, W).unwrap();
            extract(&mut enc, &scene.image, &spec).unwrap()
        })
        .collect()
}

fn bench_preprocess(c: &mut Criterion) {
    let scene = synth::blob_scene(1080, 1920, 1);
    let spec = plan_geometry(1080, 1920).unwrap();
    c.bench_function("apply_geometry 1080x1920", |b| {
        b.iter(|| apply_geometry(black_box(&scene.image), &spec).unwrap())
    });
}

fn bench_pca(c: &mut Criterion) {
    let grids = grids(8);
    let options = FitOptions::default();
    c.bench_function("pca fit 8 grids", |b| b.iter(|| pca::fit(black_box(&grids), &options).unwrap()));
    let model = pca::fit(&grids, &options).unwrap();
    c.bench_function("pca classify", |b| b.iter(|| classify(black_box(&grids[0]), &model, 0.0).unwrap()));
}

fn bench_maskops(c: &mut Criterion) {
    let grid = &grids(1)[0];
    let model = pca::fit(std::slice::from_ref(grid), &FitOptions::default()).unwrap();
    let tokens = classify(grid, &model, 0.0).unwrap();
    c.bench_function("components 8-connected", |b| {
        b.iter(|| components(black_box(&tokens.values), Connectivity::Eight, 1))
    });
    c.bench_function("coarse mask", |b| b.iter(|| coarse_mask(black_box(&tokens.values), &tokens.spec).unwrap()));
}

fn bench_iou(c: &mut Criterion) {
    let a = synth::blob_scene(1080, 1920, 2).label;
    let b_mask = synth::blob_scene(1080, 1920, 3).label;
    c.bench_function("iou 1080x1920", |b| b.iter(|| iou(black_box(&a), black_box(&b_mask)).unwrap()));
}

fn bench_pipeline(c: &mut Criterion) {
    let grids = grids(4);
    let model = pca::fit(&grids, &FitOptions::default()).unwrap();
    let scene = synth::blob_scene(H, W, 7);
    let options = SegmentOptions::default();
    c.bench_function("segment_image synthetic+trivial", |b| {
        b.iter_batched(
            || (SyntheticEncoder::new(0), TrivialRefiner),
            |(mut enc, mut refiner)| segment_image(&scene.image, &model, &mut enc, &mut refiner, None, &options).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_unet(c: &mut Criterion) {
    let net = Unet::new(UnetConfig { levels: 3, width: 8 }).unwrap();
    let params = net.init_params(0);
    let input = Tensor::zeros(3, 112, 112);
    c.bench_function("unet forward 112x112 l3 w8", |b| {
        b.iter_batched(|| input.clone(), |x| net.infer(&params, x).unwrap(), BatchSize::SmallInput)
    });
    c.bench_function("unet forward+backward 112x112 l3 w8", |b| {
        let mut grads = vec![0.0f32; net.param_count()];
        b.iter_batched(
            || input.clone(),
            |x| {
                let (logits, tape) = net.forward(&params, x).unwrap();
                net.backward(&params, &tape, &logits, &mut grads);
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_preprocess, bench_pca, bench_maskops, bench_iou, bench_pipeline, bench_unet);
criterion_main!(benches);
