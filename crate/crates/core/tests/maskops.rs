mod common;

use std::collections::BTreeSet;

use common::flood_fill;

use plantseg::maskops::{boxes, coarse_mask, components, union, Connectivity, COARSE_SIZE};
use plantseg::preprocess::plan_geometry;
use plantseg::Mask;
use proptest::prelude::*;

fn mask_strategy(max: usize) -> impl Strategy<Value = Mask> {
    (1..=max, 1..=max, 0.05f64..0.7).prop_flat_map(|(h, w, p)| {
        proptest::collection::vec(proptest::bool::weighted(p), h * w)
            .prop_map(move |d| Mask::from_vec(h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn components_match_flood_fill(mask in mask_strategy(30), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let got: BTreeSet<Vec<(usize, usize)>> = components(&mask, conn, 1)
            .into_iter()
            .map(|c| { let mut v = c.cells; v.sort(); v })
            .collect();
        prop_assert_eq!(got, flood_fill(&mask, eight));
    }

    #[test]
    fn components_partition_the_mask(mask in mask_strategy(30)) {
        let comps = components(&mask, Connectivity::Eight, 1);
        let total: usize = comps.iter().map(|c| c.cells.len()).sum();
        prop_assert_eq!(total, mask.count());
        for (i, c) in comps.iter().enumerate() {
            prop_assert_eq!(c.id, i);
        }
    }

    #[test]
    fn boxes_are_minimal(mask in mask_strategy(20), extra_h in 0usize..14, extra_w in 0usize..14) {
        let (h, w) = mask.dims();
        // last token row/column only partly covered by content
        let trim = |n: usize, e: usize| if n > 1 { n * 14 - e } else { 14 };
        let spec = plan_geometry(trim(h, extra_h), trim(w, extra_w)).unwrap();
        prop_assume!(spec.token_dims() == (h, w));
        let comps = components(&mask, Connectivity::Eight, 1);
        for (c, b) in comps.iter().zip(boxes(&comps, &spec).unwrap()) {
            let mut pixels = Vec::new();
            for &(r, col) in &c.cells {
                for y in r * 14..((r + 1) * 14).min(spec.resized_h) {
                    for x in col * 14..((col + 1) * 14).min(spec.resized_w) {
                        pixels.push((y, x));
                    }
                }
            }
            prop_assert!(pixels.iter().all(|&(y, x)| b.contains(y, x)));
            // shrinking any side drops a covered pixel
            prop_assert!(pixels.iter().any(|&(y, _)| y == b.y_min));
            prop_assert!(pixels.iter().any(|&(y, _)| y == b.y_max));
            prop_assert!(pixels.iter().any(|&(_, x)| x == b.x_min));
            prop_assert!(pixels.iter().any(|&(_, x)| x == b.x_max));
            prop_assert_eq!(b.token_area, c.cells.len());
        }
    }

    #[test]
    fn coarse_mask_matches_cell_coverage(mask in mask_strategy(40)) {
        let (h, w) = mask.dims();
        let spec = plan_geometry(h * 14, w * 14).unwrap();
        let coarse = coarse_mask(&mask, &spec).unwrap();
        let s = COARSE_SIZE as f64;
        for i in 0..COARSE_SIZE {
            let (y0, y1) = (i as f64 * h as f64 / s, (i + 1) as f64 * h as f64 / s);
            for j in 0..COARSE_SIZE {
                let (x0, x1) = (j as f64 * w as f64 / s, (j + 1) as f64 * w as f64 / s);
                let mut any = false;
                for r in 0..h {
                    // positive-length overlap of [r, r+1) with [y0, y1)
                    if (r as f64) < y1 && (r + 1) as f64 > y0 {
                        for c in 0..w {
                            if (c as f64) < x1 && (c + 1) as f64 > x0 && mask.get(r, c) {
                                any = true;
                            }
                        }
                    }
                }
                prop_assert_eq!(coarse.values.get(i, j), any, "cell ({}, {})", i, j);
            }
        }
    }

    #[test]
    fn union_is_pixelwise_or(a in proptest::collection::vec(any::<bool>(), 96),
                             b in proptest::collection::vec(any::<bool>(), 96),
                             c in proptest::collection::vec(any::<bool>(), 96)) {
        let masks: Vec<Mask> = [&a, &b, &c].iter().map(|d| Mask::from_vec(8, 12, d.to_vec()).unwrap()).collect();
        let u = union(&masks, (8, 12)).unwrap();
        for i in 0..96 {
            prop_assert_eq!(u.as_slice()[i], a[i] || b[i] || c[i]);
        }
        // idempotent and order-independent
        let rev: Vec<Mask> = masks.iter().rev().cloned().collect();
        prop_assert_eq!(&union(&rev, (8, 12)).unwrap(), &u);
        prop_assert_eq!(&union(&[u.clone(), u.clone()], (8, 12)).unwrap(), &u);
    }
}

#[test]
fn union_rejects_mismatched_sizes() {
    assert!(union(&[Mask::new(2, 3), Mask::new(3, 2)], (2, 3)).is_err());
}
