use plantseg::eval::{aggregate, iou, mean_std, read_records, write_records, EvalRecord, GroupBy};
use plantseg::Mask;
use proptest::prelude::*;

/// Pixel counting with exact rational comparison.
fn oracle(a: &Mask, b: &Mask) -> (usize, usize) {
    let mut inter = 0;
    let mut uni = 0;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    (inter, uni)
}

fn pair() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..=64, 1usize..=64, 0.0f64..1.0, 0.0f64..1.0).prop_flat_map(|(h, w, p, q)| {
        (
            proptest::collection::vec(proptest::bool::weighted(p), h * w),
            proptest::collection::vec(proptest::bool::weighted(q), h * w),
        )
            .prop_map(move |(a, b)| (Mask::from_vec(h, w, a).unwrap(), Mask::from_vec(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn iou_matches_pixel_counts((a, b) in pair()) {
        let s = iou(&a, &b).unwrap();
        let (i, u) = oracle(&a, &b);
        if u == 0 {
            prop_assert!(s.both_empty);
            prop_assert_eq!(s.value, 1.0);
        } else {
            prop_assert!(!s.both_empty);
            prop_assert_eq!(s.value, i as f64 / u as f64);
        }
        prop_assert!((0.0..=1.0).contains(&s.value));
        prop_assert_eq!(iou(&b, &a).unwrap(), s);
        prop_assert_eq!(iou(&a, &a).unwrap().value, 1.0);
    }

    #[test]
    fn population_std_is_scale_covariant(v in proptest::collection::vec(0.0f64..1.0, 1..40), k in 0.1f64..5.0) {
        let (m, s) = mean_std(&v);
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        let (m2, s2) = mean_std(&scaled);
        prop_assert!((m2 - k * m).abs() < 1e-9);
        prop_assert!((s2 - k * s).abs() < 1e-9);
        prop_assert!(s >= 0.0);
    }
}

#[test]
fn hand_case_two_of_six() {
    let pred = Mask::from_vec(2, 4, vec![true, true, true, false, true, false, false, false]).unwrap();
    let gt = Mask::from_vec(2, 4, vec![false, true, false, true, true, false, false, true]).unwrap();
    let s = iou(&pred, &gt).unwrap();
    assert_eq!(s.value, 2.0 / 6.0);
}

#[test]
fn records_round_trip_and_aggregate() {
    let rec = |id: &str, method: &str, v: f64| EvalRecord {
        image_id: id.into(),
        dataset: "d".into(),
        method: method.into(),
        iou: v,
        mask_input_used: false,
        seed: 1,
        both_empty: false,
    };
    let records = vec![rec("a", "m", 0.5), rec("b", "m", 1.0), rec("a", "n", 0.25)];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
    let stats = aggregate(&records, GroupBy::Method);
    assert_eq!(stats.len(), 2);
    assert!((stats[0].mean - 0.75).abs() < 1e-12 && (stats[0].std - 0.25).abs() < 1e-12);
    assert_eq!(stats[1].count, 1);
}
