use pestvl_core::data::{build_manifest, split_counts, write_synthetic_tree, DatasetManifest};
use pestvl_core::metrics::{metrics_from_confusion, MetricOptions};
use proptest::prelude::*;

fn confusion() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (2usize..7).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..20, k), k))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn report_invariants(mut m in confusion()) {
        // Every class needs at least one label for all recalls to be defined.
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = row[i].max(if row.iter().sum::<u64>() == 0 { 1 } else { 0 });
        }
        let r = metrics_from_confusion(&m, MetricOptions::default()).unwrap();
        let trace: u64 = (0..m.len()).map(|i| m[i][i]).sum();
        prop_assert_eq!(r.total, m.iter().flatten().sum::<u64>());
        prop_assert!((r.accuracy * r.total as f64 - trace as f64).abs() < 1e-9);
        prop_assert!(r.gm <= r.macro_recall + 1e-12);
        for v in [r.accuracy, r.precision, r.f1, r.gm, r.macro_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn split_counts_sum_and_stay_close(n in 0usize..500, a in 0usize..10, b in 0usize..10, c in 1usize..10) {
        let counts = split_counts(n, [a, b, c]);
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        let total = (a + b + c) as f64;
        for (count, r) in counts.iter().zip([a, b, c]) {
            prop_assert!((*count as f64 - n as f64 * r as f64 / total).abs() < 1.0);
        }
    }
}

fn per_class_counts(m: &DatasetManifest, split: &[usize]) -> Vec<usize> {
    let mut out = vec![0; m.classes.len()];
    for &i in split {
        out[m.samples[i].class_id] += 1;
    }
    out
}

#[test]
fn ten_per_class_splits_seven_one_two() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_tree(dir.path(), 2, 10, 8, 1).unwrap();
    let m = build_manifest(dir.path(), [7, 1, 2], 5).unwrap();
    assert_eq!(per_class_counts(&m, &m.splits.train), vec![7, 7]);
    assert_eq!(per_class_counts(&m, &m.splits.val), vec![1, 1]);
    assert_eq!(per_class_counts(&m, &m.splits.test), vec![2, 2]);
    assert_eq!(build_manifest(dir.path(), [7, 1, 2], 5).unwrap(), m);
    assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
    let other = build_manifest(dir.path(), [7, 1, 2], 6).unwrap();
    assert_eq!(other.samples, m.samples);
}

#[test]
fn nine_per_class_uses_largest_remainder() {
    // 6.3 / 0.9 / 1.8: floors 6, 0, 1; the two largest remainders get the rest.
    assert_eq!(split_counts(9, [7, 1, 2]), [6, 1, 2]);
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_tree(dir.path(), 3, 9, 8, 2).unwrap();
    let m = build_manifest(dir.path(), [7, 1, 2], 0).unwrap();
    assert_eq!(per_class_counts(&m, &m.splits.train), vec![6, 6, 6]);
    assert_eq!(per_class_counts(&m, &m.splits.val), vec![1, 1, 1]);
    assert_eq!(per_class_counts(&m, &m.splits.test), vec![2, 2, 2]);
}

#[test]
fn empty_class_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_tree(dir.path(), 2, 3, 8, 0).unwrap();
    std::fs::create_dir(dir.path().join("weevil")).unwrap();
    let err = build_manifest(dir.path(), [7, 1, 2], 0).unwrap_err();
    assert!(err.to_string().contains("weevil"), "{err}");
}
