use image::{Rgb, RgbImage};
use plantseg::preprocess::{
    plan_geometry, resize_bilinear, restore_mask, token_box_to_pixel_box, TokenBox, MAX_SHORT_EDGE, PATCH,
};
use plantseg::Mask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn halving_is_a_two_by_two_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let src = RgbImage::from_fn(64, 48, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
    let out = resize_bilinear(&src, 24, 32);
    for y in 0..24u32 {
        for x in 0..32u32 {
            for c in 0..3 {
                let sum: u32 = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| src.get_pixel(2 * x + dx, 2 * y + dy).0[c] as u32)
                    .sum();
                let expected = sum as f64 / 4.0;
                let got = out.get_pixel(x, y).0[c] as f64;
                assert!((got - expected).abs() <= 1.0, "({y},{x},{c}) {got} vs {expected}");
            }
        }
    }
}

#[test]
fn restore_at_half_scale_expands_blocks() {
    // shortest edge 2 * 1036 -> exactly half size
    let spec = plan_geometry(2 * MAX_SHORT_EDGE, 2 * 1400).unwrap();
    assert_eq!((spec.resized_h, spec.resized_w), (MAX_SHORT_EDGE, 1400));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let small = Mask::from_fn(spec.padded_h, spec.padded_w, |_, _| rng.random_bool(0.5));
    let big = restore_mask(&small, &spec).unwrap();
    assert_eq!(big.dims(), (2 * MAX_SHORT_EDGE, 2800));
    for y in (0..big.height()).step_by(7) {
        for x in 0..big.width() {
            assert_eq!(big.get(y, x), small.get(y / 2, x / 2));
        }
    }
}

#[test]
fn token_pixel_round_trip_on_random_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let h = rng.random_range(PATCH..4000);
        let w = rng.random_range(PATCH..4000);
        let spec = plan_geometry(h, w).unwrap();
        assert_eq!(spec.padded_h % PATCH, 0);
        assert_eq!(spec.padded_w % PATCH, 0);
        assert!(spec.resized_h.min(spec.resized_w) <= MAX_SHORT_EDGE);
        assert!(spec.pad_bottom < PATCH && spec.pad_right < PATCH);
        for _ in 0..4 {
            let y = rng.random_range(0..spec.resized_h);
            let x = rng.random_range(0..spec.resized_w);
            let (r, c) = spec.pixel_to_token(y, x);
            assert!(!spec.is_pad_token(r, c));
            let b = token_box_to_pixel_box(&TokenBox::single(r, c), &spec).unwrap();
            assert!(b.contains(y, x));
            for (py, px) in [(b.y_min, b.x_min), (b.y_max, b.x_max)] {
                assert_eq!(spec.pixel_to_token(py, px), (r, c));
            }
        }
    }
}

proptest! {
    #[test]
    fn aspect_ratio_is_preserved(h in 14usize..6000, w in 14usize..6000) {
        let s = plan_geometry(h, w).unwrap();
        let before = h as f64 / w as f64;
        let after = s.resized_h as f64 / s.resized_w as f64;
        // rounding moves each edge by at most half a pixel
        let tol = before * (0.5 / s.resized_h as f64 + 0.5 / s.resized_w as f64) * 1.01;
        prop_assert!((before - after).abs() <= tol);
        if h.min(w) > MAX_SHORT_EDGE {
            prop_assert_eq!(s.resized_h.min(s.resized_w), MAX_SHORT_EDGE);
        }
    }

    #[test]
    fn restoring_token_masks_matches_pixel_route(h in 14usize..400, w in 14usize..400, seed in any::<u64>()) {
        let spec = plan_geometry(h, w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = Mask::from_fn(spec.token_rows, spec.token_cols, |_, _| rng.random_bool(0.4));
        let direct = restore_mask(&tokens, &spec).unwrap();
        let expanded = Mask::from_fn(spec.padded_h, spec.padded_w, |y, x| tokens.get(y / PATCH, x / PATCH));
        prop_assert_eq!(direct, restore_mask(&expanded, &spec).unwrap());
    }
}
