use proptest::prelude::*;

use kvmon::harness::{run_trial, ExperimentConfig};
use kvmon::kvstore::{Version, VersionOrder, VersionedValue};

fn write() -> impl Strategy<Value = (Version, u8)> {
    (prop::collection::vec((0u32..3, 0u64..4), 1..4), any::<u8>())
        .prop_map(|(pairs, val)| (Version::from_pairs(pairs), val))
}

proptest! {
    #[test]
    fn sibling_sets_are_order_independent_antichains(
        writes in prop::collection::vec(write(), 0..12),
        perm in any::<prop::sample::Index>(),
    ) {
        let apply = |ws: &[(Version, u8)]| {
            let mut vv = VersionedValue::new();
            for (v, x) in ws {
                vv.merge_in(v.clone(), vec![*x]);
            }
            vv
        };
        let a = apply(&writes);
        prop_assert!(a.is_antichain());
        // Every write is kept or covered by something kept.
        for (v, _) in &writes {
            prop_assert!(a.versions().any(|s| matches!(v.order(s), VersionOrder::Before | VersionOrder::Equal)));
        }
        let mut rotated = writes.clone();
        if !rotated.is_empty() {
            let k = perm.index(rotated.len());
            rotated.rotate_left(k);
        }
        let b = apply(&rotated);
        let versions = |x: &VersionedValue| x.versions().cloned().collect::<Vec<_>>();
        prop_assert_eq!(versions(&a), versions(&b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn sequential_coloring_is_proper_and_never_flagged(
        seed in 0u64..1000,
        graph in prop::sample::select(vec!["line", "regular:4", "power_law", "grid:6"]),
        quorum in prop::sample::select(vec!["N3R1W3", "N3R2W2"]),
        task_size in 1usize..12,
    ) {
        let cfg = ExperimentConfig::from_toml(&format!(
            r#"
            name = "prop"
            duration_s = 3600
            seed = {seed}
            [cluster]
            quorum = "{quorum}"
            monitors = true
            [topology]
            preset = "cross_region"
            clients_per_region = 2
            [workload]
            kind = "coloring"
            graph = "{graph}"
            nodes = 60
            task_size = {task_size}
            "#
        ))
        .unwrap();
        let r = run_trial(&cfg, 0).unwrap();
        prop_assert!(r.completed);
        prop_assert_eq!(r.proper_coloring, Some(true));
        prop_assert_eq!(r.detections().count(), 0);
    }
}
