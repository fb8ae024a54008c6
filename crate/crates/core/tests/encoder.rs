mod common;

use plantseg::encoder::{extract, Encoder, EncoderId, FeatureCache, SyntheticEncoder, SYNTHETIC_DIM};
use plantseg::preprocess::{apply_geometry, plan_geometry};
use plantseg::synth::{rect_scene, token_labels};

#[test]
fn same_input_same_tokens() {
    let sc = rect_scene(200, 260, 4);
    let (a, _) = common::grid_of(&mut SyntheticEncoder::new(1), &sc.image);
    let (b, _) = common::grid_of(&mut SyntheticEncoder::new(1), &sc.image);
    let (c, _) = common::grid_of(&mut SyntheticEncoder::new(2), &sc.image);
    assert_eq!(a, b);
    assert_ne!(a.features(), c.features());
    assert_eq!(a.dim(), SYNTHETIC_DIM);
    assert_eq!(a.encoder_id(), EncoderId::Synthetic.as_str());
}

#[test]
fn nearest_centroid_recovers_token_labels() {
    let plant = SyntheticEncoder::cluster_mean(true);
    let soil = SyntheticEncoder::cluster_mean(false);
    let dist = |t: &[f32], m: &[f32]| t.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
    let mut agree = 0usize;
    let mut total = 0usize;
    for seed in 0..4 {
        let sc = rect_scene(300, 420, seed);
        let spec = plan_geometry(300, 420).unwrap();
        let (grid, _) = common::grid_of(&mut SyntheticEncoder::new(0), &sc.image);
        let truth = token_labels(&sc.label, &spec);
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                if grid.is_pad(r, c) {
                    continue;
                }
                let t = grid.token(r, c);
                let guess = dist(t, &plant) < dist(t, &soil);
                agree += (guess == truth.get(r, c)) as usize;
                total += 1;
            }
        }
    }
    let acc = agree as f64 / total as f64;
    assert!(acc > 0.99, "accuracy {acc}");
}

#[test]
fn cache_serves_repeat_requests() {
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path()).unwrap();
    let sc = rect_scene(150, 170, 2);
    let spec = plan_geometry(150, 170).unwrap();
    let padded = apply_geometry(&sc.image, &spec).unwrap();
    let mut enc = SyntheticEncoder::new(0);
    let first = cache.get_or_compute(&mut enc, &padded, &spec).unwrap();
    let second = cache.get_or_compute(&mut enc, &padded, &spec).unwrap();
    assert_eq!(enc.calls(), 1);
    assert_eq!(first, second);
    assert_eq!(first, extract(&mut SyntheticEncoder::new(0), &padded, &spec).unwrap());
    assert_eq!(enc.id(), "synthetic");
}
