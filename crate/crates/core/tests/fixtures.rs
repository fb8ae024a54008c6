//! The in-repo mini fixtures stay in sync with the generator.

use std::path::PathBuf;

use plantseg::datasets::{self, write_mini_fixture, DatasetId, Split};

fn fixture_root(d: DatasetId) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mini").join(d.as_str())
}

#[test]
fn shipped_fixtures_match_checksums() {
    for d in DatasetId::ALL {
        let root = fixture_root(d);
        let report = datasets::verify(d, &root, Some(&root.join("SHA256SUMS"))).unwrap();
        assert_eq!(report.checksums_checked, 2 * report.total, "{d}");
        assert!(report.checksum_failures.is_empty(), "{d}: {:?}", report.checksum_failures);
    }
}

#[test]
fn shipped_fixtures_equal_regenerated_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    for d in DatasetId::ALL {
        let fresh = tmp.path().join(d.as_str());
        write_mini_fixture(d, &fresh, 0).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let shipped = datasets::load(d, &fixture_root(d), split).unwrap();
            let regenerated = datasets::load(d, &fresh, split).unwrap();
            assert_eq!(shipped.len(), regenerated.len(), "{d} {split:?}");
            for (a, b) in shipped.iter().zip(&regenerated) {
                assert_eq!(a.id, b.id);
                let (ia, ga) = a.load_pair().unwrap();
                let (ib, gb) = b.load_pair().unwrap();
                assert_eq!(ia, ib, "{}", a.id);
                assert_eq!(ga, gb, "{}", a.id);
            }
        }
    }
}
