use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skeletonx::data::{DatasetManifest, SampleRecord};
use skeletonx::sampler::{
    build_pair_index, cross_subject_split, limited_scale_select, one_shot_split, DaspKind, LimitedScaleSpec,
    SadpKind, StaticPairs,
};

fn records() -> impl Strategy<Value = Vec<(u32, u32, usize)>> {
    prop::collection::vec((1u32..8, 1u32..4, 0usize..6), 1..120)
}

fn manifest(rows: &[(u32, u32, usize)]) -> DatasetManifest {
    DatasetManifest::new(
        rows.iter()
            .enumerate()
            .map(|(i, &(performer, setup, action))| SampleRecord {
                sample_id: format!("r{i:04}"),
                performer,
                setup,
                action,
                path: format!("seq/r{i:04}.skx"),
            })
            .collect(),
    )
}

proptest! {
    #[test]
    fn partners_follow_their_flags(rows in records(), seed in 0u64..1000) {
        let m = manifest(&rows);
        let idx = build_pair_index(&m, seed);
        prop_assert_eq!(idx.len(), m.len());
        for (i, a) in m.records.iter().enumerate() {
            let f = idx.flags_of(i);
            prop_assert!(!idx.dasp_of(i).is_empty());
            prop_assert!(!idx.sadp_of(i).is_empty());
            for &j in idx.dasp_of(i) {
                let b = &m.records[j];
                match f.dasp {
                    DaspKind::Exact => prop_assert!(b.performer == a.performer && b.action != a.action),
                    DaspKind::Fallback => prop_assert!(b.performer != a.performer && b.action != a.action),
                    DaspKind::SelfPair => prop_assert_eq!(j, i),
                }
            }
            for &j in idx.sadp_of(i) {
                let b = &m.records[j];
                prop_assert_eq!(b.action, a.action);
                match f.sadp {
                    SadpKind::Exact => prop_assert!(b.performer != a.performer),
                    SadpKind::Relaxed => prop_assert!(b.performer == a.performer && j != i),
                    SadpKind::SelfPair => prop_assert_eq!(j, i),
                }
            }
        }
    }

    #[test]
    fn pair_index_is_seed_deterministic(rows in records(), seed in 0u64..1000) {
        let m = manifest(&rows);
        let a = build_pair_index(&m, seed);
        let b = build_pair_index(&m, seed);
        for i in 0..m.len() {
            prop_assert_eq!(a.dasp_of(i), b.dasp_of(i));
            prop_assert_eq!(a.sadp_of(i), b.sadp_of(i));
        }
    }

    #[test]
    fn candidate_sets_ignore_the_seed(rows in records(), s1 in 0u64..1000, s2 in 0u64..1000) {
        let m = manifest(&rows);
        let (a, b) = (build_pair_index(&m, s1), build_pair_index(&m, s2));
        for i in 0..m.len() {
            let sorted = |v: &[usize]| { let mut v = v.to_vec(); v.sort(); v };
            prop_assert_eq!(sorted(a.dasp_of(i)), sorted(b.dasp_of(i)));
            prop_assert_eq!(sorted(a.sadp_of(i)), sorted(b.sadp_of(i)));
        }
    }

    #[test]
    fn frozen_pairs_round_trip(rows in records(), seed in 0u64..1000) {
        let m = manifest(&rows);
        let frozen = build_pair_index(&m, seed).freeze(&mut ChaCha8Rng::seed_from_u64(seed));
        let back = StaticPairs::parse(&frozen.to_text()).unwrap();
        prop_assert_eq!(&back, &frozen);
        let idx = back.to_index(&m).unwrap();
        for i in 0..m.len() {
            prop_assert_eq!(idx.dasp_of(i).len(), 1);
            prop_assert_eq!(idx.sadp_of(i).len(), 1);
        }
    }

    #[test]
    fn selection_respects_budget_and_quota(rows in records(), n in 1usize..5, p in 1u32..8) {
        let m = manifest(&rows);
        let spec = LimitedScaleSpec { samples_per_class: n, performer_budget: p, allow_short: true };
        let sel = limited_scale_select(&m, &spec).unwrap();
        let hist = sel.manifest.class_histogram();
        for r in &sel.manifest.records {
            prop_assert!(r.performer <= p);
        }
        for (c, &count) in hist.iter().enumerate() {
            let avail = m.records.iter().filter(|r| r.action == c && r.performer <= p).count();
            prop_assert_eq!(count, avail.min(n));
        }
        let short: BTreeSet<usize> = sel.shortfalls.iter().map(|&(c, _)| c).collect();
        let strict = limited_scale_select(&m, &LimitedScaleSpec { allow_short: false, ..spec });
        prop_assert_eq!(strict.is_err(), !short.is_empty());
    }

    #[test]
    fn selection_is_a_sub_multiset_in_class_order(rows in records(), n in 1usize..5, p in 1u32..8) {
        let m = manifest(&rows);
        let spec = LimitedScaleSpec { samples_per_class: n, performer_budget: p, allow_short: true };
        let sel = limited_scale_select(&m, &spec).unwrap();
        let ids: BTreeSet<&str> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
        let mut seen = BTreeSet::new();
        for r in &sel.manifest.records {
            prop_assert!(ids.contains(r.sample_id.as_str()));
            prop_assert!(seen.insert(r.sample_id.clone()));
        }
        let classes: Vec<usize> = sel.manifest.records.iter().map(|r| r.action).collect();
        prop_assert!(classes.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cross_subject_partitions(rows in records()) {
        let m = manifest(&rows);
        let train: BTreeSet<u32> = [1, 2, 3].into();
        if let Ok((a, b)) = cross_subject_split(&m, &train) {
            prop_assert_eq!(a.len() + b.len(), m.len());
            prop_assert!(a.records.iter().all(|r| train.contains(&r.performer)));
            prop_assert!(b.records.iter().all(|r| !train.contains(&r.performer)));
        }
    }
}

#[test]
fn one_shot_split_separates_base_and_novel() {
    let rows: Vec<(u32, u32, usize)> = (0..60).map(|i| (1 + i % 3, 1, (i % 6) as usize)).collect();
    let m = manifest(&rows);
    let novel: BTreeSet<usize> = [4, 5].into();
    let ex: BTreeMap<usize, String> = [(4, "r0004".to_string()), (5, "r0005".to_string())].into();
    let split = one_shot_split(&m, &novel, &ex).unwrap();
    assert!(split.base_train.records.iter().all(|r| r.action < 4));
    assert_eq!(split.exemplars.len(), 2);
    assert_eq!(split.novel_queries.len(), 20 - 2);
    assert!(split.novel_queries.records.iter().all(|r| r.sample_id != "r0004" && r.sample_id != "r0005"));

    let wrong: BTreeMap<usize, String> = [(4, "r0005".to_string()), (5, "r0011".to_string())].into();
    assert!(one_shot_split(&m, &novel, &wrong).is_err());
}
