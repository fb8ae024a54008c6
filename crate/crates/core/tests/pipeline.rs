mod common;

use plantseg::eval::iou;
use plantseg::pipeline::{fit_model, segment_image, SegmentOptions};
use plantseg::synth::background_scene;
use plantseg::{SyntheticEncoder, TrivialRefiner};

const FIT_SEEDS: std::ops::Range<u64> = 1000..1010;

fn run(options: &SegmentOptions, seeds: std::ops::Range<u64>) -> Vec<(f64, Vec<plantseg::BoxPrompt>)> {
    let model = common::fit_on(FIT_SEEDS, 0);
    let mut enc = SyntheticEncoder::new(0);
    seeds
        .map(|s| {
            let sc = common::scene(s);
            let out = segment_image(&sc.image, &model, &mut enc, &mut TrivialRefiner, None, options).unwrap();
            (iou(&out.mask, &sc.label).unwrap().value, out.prompts)
        })
        .collect()
}

#[test]
fn synthetic_scenes_segment_accurately() {
    let res = run(&SegmentOptions::default(), 0..20);
    let mean = res.iter().map(|r| r.0).sum::<f64>() / res.len() as f64;
    let worst = res.iter().map(|r| r.0).fold(1.0, f64::min);
    eprintln!("mean IoU {mean:.4}, worst {worst:.4}");
    assert!(mean >= 0.95, "mean IoU {mean}");
}

#[test]
fn mask_input_arm_keeps_prompts() {
    let plain = run(&SegmentOptions::default(), 0..5);
    let with_mask = run(
        &SegmentOptions {
            use_mask_input: true,
            ..SegmentOptions::default()
        },
        0..5,
    );
    for (a, b) in plain.iter().zip(&with_mask) {
        assert_eq!(a.1, b.1);
        assert!((0.0..=1.0).contains(&b.0));
    }
}

#[test]
fn reruns_are_identical() {
    assert_eq!(run(&SegmentOptions::default(), 3..6), run(&SegmentOptions::default(), 3..6));
}

#[test]
fn background_only_gives_empty_mask() {
    let model = common::fit_on(FIT_SEEDS, 0);
    let sc = background_scene(300, 420, 9);
    let opts = SegmentOptions {
        keep_intermediates: true,
        ..SegmentOptions::default()
    };
    let out = segment_image(&sc.image, &model, &mut common::NoiselessEncoder, &mut TrivialRefiner, None, &opts).unwrap();
    assert!(out.prompts.is_empty());
    assert!(out.mask.is_empty());
    assert_eq!(out.mask.dims(), (300, 420));
    let score = iou(&out.mask, &sc.label).unwrap();
    assert!(score.both_empty && score.value == 1.0);
}

#[test]
fn background_flips_stay_within_noise_allowance() {
    let model = common::fit_on(FIT_SEEDS, 0);
    let mut flipped = 0;
    let mut total = 0;
    for seed in 0..10 {
        let sc = background_scene(420, 560, seed);
        let out = segment_image(&sc.image, &model, &mut SyntheticEncoder::new(0), &mut TrivialRefiner, None, &SegmentOptions::default()).unwrap();
        flipped += out.mask.count() / (14 * 14);
        total += 30 * 40;
    }
    assert!((flipped as f64) < 0.01 * total as f64, "{flipped} of {total} tokens");
}

#[test]
fn cached_fit_matches_in_memory_fit() {
    let scenes: Vec<_> = (0..4).map(common::scene).collect();
    let image_at = |i: usize| Ok(scenes[i].image.clone());
    let dir = tempfile::tempdir().unwrap();
    let cache = plantseg::FeatureCache::new(dir.path()).unwrap();
    let opts = plantseg::pca::FitOptions::default();
    let fit = |cache| fit_model(&mut SyntheticEncoder::new(0), scenes.len(), &image_at, cache, &opts, false).unwrap();
    let (plain, cached) = (fit(None), fit(Some(&cache)));
    let again = fit(Some(&cache));
    assert_eq!(cached.leading(), again.leading());
    assert_eq!(cached.orientation, plain.orientation);
    for (a, b) in plain.leading().iter().zip(cached.leading()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let (grid, _) = common::grid_of(&mut SyntheticEncoder::new(0), &scenes[0].image);
    let token = grid.token(3, 3);
    assert!((plain.score(token) - cached.score(token)).abs() < 1e-9);
}
