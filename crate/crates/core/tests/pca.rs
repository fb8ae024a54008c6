mod common;

use common::{abs_cos, anisotropic_tokens, covariance, grid_from_tokens, jacobi_eigen};
use plantseg::pca::{classify, fit, FitOptions, PcaModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fit_tokens(tokens: &[Vec<f32>], rows: usize, cols: usize) -> PcaModel {
    fit(&[grid_from_tokens(tokens, rows, cols, "t")], &FitOptions::default()).unwrap()
}

#[test]
fn leading_components_match_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..12 {
        let (rows, cols) = (rng.random_range(4..40), rng.random_range(4..50));
        let d = rng.random_range(2..=64);
        let tokens = anisotropic_tokens(&mut rng, rows * cols, d);
        let model = fit_tokens(&tokens, rows, cols);
        let wide: Vec<Vec<f64>> = tokens.iter().map(|t| t.iter().map(|&x| x as f64).collect()).collect();
        let eig = jacobi_eigen(covariance(&wide));
        for k in 0..model.components.len().min(2) {
            let c = abs_cos(&model.components[k], &eig[k].1);
            assert!(c > 1.0 - 1e-9, "case {case} component {k}: |cos| = {c}");
            let rel = (model.explained_variance[k] - eig[k].0).abs() / eig[k].0;
            assert!(rel < 1e-9, "case {case} eigenvalue {k}: {rel}");
        }
        assert!(model.orthonormality_error() < 1e-6);
    }
}

#[test]
fn canonical_sign_makes_largest_loading_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens = anisotropic_tokens(&mut rng, 200, 10);
    let model = fit_tokens(&tokens, 10, 20);
    for c in &model.components {
        let big = c.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
        assert!(big > 0.0);
    }
    let negated: Vec<Vec<f32>> = tokens.iter().map(|t| t.iter().map(|x| -x).collect()).collect();
    let m2 = fit_tokens(&negated, 10, 20);
    assert!(abs_cos(m2.leading(), model.leading()) > 1.0 - 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn joint_sign_flip_keeps_classification(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = anisotropic_tokens(&mut rng, 96, 8);
        let grid = grid_from_tokens(&tokens, 8, 12, "t");
        let model = fit(std::slice::from_ref(&grid), &FitOptions::default()).unwrap();
        let flipped = model.negated().with_orientation(-model.orientation);
        let a = classify(&grid, &model, 0.0).unwrap();
        let b = classify(&grid, &flipped, 0.0).unwrap();
        prop_assert_eq!(a.values, b.values);
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rescaling_features_rescales_scores(seed in any::<u64>(), k in 0.05f32..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = anisotropic_tokens(&mut rng, 96, 8);
        let grid = grid_from_tokens(&tokens, 8, 12, "t");
        let scaled = grid.scaled(k);
        let m1 = fit(std::slice::from_ref(&grid), &FitOptions::default()).unwrap();
        let m2 = fit(std::slice::from_ref(&scaled), &FitOptions::default()).unwrap();
        prop_assert!(abs_cos(m1.leading(), m2.leading()) > 1.0 - 1e-6);
        let a = classify(&grid, &m1, 0.0).unwrap();
        let b = classify(&scaled, &m2, 0.0).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((y - k as f64 * x).abs() < 1e-3 * (1.0 + y.abs()));
        }
        // same sign pattern, except for scores that are numerically zero
        for (i, (x, y)) in a.scores.iter().zip(&b.scores).enumerate() {
            if x.abs() > 1e-4 {
                prop_assert_eq!(a.values.as_slice()[i], b.values.as_slice()[i]);
                prop_assert_eq!(*x >= 0.0, *y >= 0.0);
            }
        }
    }
}

#[test]
fn subsample_is_exactly_the_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens = anisotropic_tokens(&mut rng, 600, 6);
    let grid = grid_from_tokens(&tokens, 20, 30, "t");
    let opts = FitOptions {
        token_cap: 250,
        seed: 4,
        ..FitOptions::default()
    };
    let a = fit(std::slice::from_ref(&grid), &opts).unwrap();
    let b = fit(std::slice::from_ref(&grid), &opts).unwrap();
    assert_eq!(a.fit_meta.token_count, 250);
    assert_eq!(a.fit_meta.total_tokens, 600);
    assert_eq!(a.components, b.components);
    // the subsample still finds the dominant direction
    let full = fit(std::slice::from_ref(&grid), &FitOptions::default()).unwrap();
    assert!(abs_cos(a.leading(), full.leading()) > 0.95);
}
