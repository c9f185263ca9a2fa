use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skeletonx::backbone::EncoderConfig;
use skeletonx::data::SkeletonLayout;
use skeletonx::head::{HeadConfig, Mask};
use skeletonx::model::{HeadKind, Model, ModelConfig};
use skeletonx::oneshot::{extract_features, protonet_match, run_oneshot, Distance, OneShotConfig};
use skeletonx::params::{Mode, Session};
use skeletonx::synth::{generate, SynthConfig};
use skeletonx::train::{TensorSet, TrainConfig};

fn brute_force(ex: &Array2<f64>, q: &Array2<f64>, cosine: bool) -> Vec<usize> {
    q.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for j in 0..ex.nrows() {
                let e = ex.row(j);
                let score = if cosine {
                    let dot: f64 = row.iter().zip(e.iter()).map(|(a, b)| a * b).sum();
                    let n = |v: ndarray::ArrayView1<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    -dot / (n(row) * n(e))
                } else {
                    row.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
                };
                if score < best_score {
                    best_score = score;
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn gaussian(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

#[test]
fn matches_brute_force_on_random_queries() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10 {
        let ex = gaussian(&mut r, 5, 16);
        let q = gaussian(&mut r, 100, 16);
        for (d, cos) in [(Distance::SqEuclidean, false), (Distance::Cosine, true)] {
            let (pred, fb) = protonet_match(&ex, &q, d);
            assert_eq!(pred, brute_force(&ex, &q, cos));
            assert!(fb.iter().all(|&f| !f));
        }
    }
}

proptest! {
    #[test]
    fn euclidean_ignores_shared_shift(seed in 0u64..500, shift in -5.0f64..5.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ex = gaussian(&mut r, 4, 8);
        let q = gaussian(&mut r, 20, 8);
        let (a, _) = protonet_match(&ex, &q, Distance::SqEuclidean);
        let (b, _) = protonet_match(&(&ex + shift), &(&q + shift), Distance::SqEuclidean);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn cosine_ignores_positive_scale(seed in 0u64..500, scale in 0.01f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ex = gaussian(&mut r, 4, 8);
        let q = gaussian(&mut r, 20, 8);
        let (a, _) = protonet_match(&ex, &q, Distance::Cosine);
        let (b, _) = protonet_match(&ex, &(&q * scale), Distance::Cosine);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn exemplars_match_themselves(seed in 0u64..500) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let ex = gaussian(&mut r, 6, 8);
        let (pred, _) = protonet_match(&ex, &ex, Distance::SqEuclidean);
        prop_assert_eq!(pred, (0..6).collect::<Vec<_>>());
    }
}

fn tiny_data(classes: usize) -> (skeletonx::synth::SynthData, TensorSet) {
    let data = generate(&SynthConfig {
        class_count: classes,
        performer_count: 3,
        frames: 16,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let set = TensorSet::new(&data.manifest, &data.sequences).unwrap();
    (data, set)
}

#[test]
fn extracted_features_equal_manual_forward() {
    let (_, set) = tiny_data(3);
    let cfg = ModelConfig {
        encoder: EncoderConfig::desk(),
        head: HeadKind::Skeletonx(HeadConfig::default()),
        class_count: 3,
        layout: SkeletonLayout::humanoid11(),
    };
    let model = Model::<f64>::new(cfg, 1).unwrap();
    let got = extract_features(&model, &set).unwrap();
    let rows: Vec<usize> = (0..set.len()).collect();
    let mut sess = Session::new(model.store(), Mode::Eval);
    let x = sess.input(set.gather::<f64>(&rows).into_dyn());
    let fe = model.encode(&mut sess, x);
    let d = model.disentangle(&mut sess, fe).unwrap();
    let v = model.head().unwrap().aggregate(&mut sess, &d, &d, Mask::None);
    let want = sess.tape.value(v).clone();
    let diff = (&got.into_dyn() - &want).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
    assert!(diff < 1e-9, "max deviation {diff}");
}

fn oneshot_config(novel: BTreeSet<usize>, data: &skeletonx::synth::SynthData, epochs: usize) -> OneShotConfig {
    let exemplar_ids: BTreeMap<usize, String> = novel
        .iter()
        .map(|&c| (c, data.manifest.records.iter().find(|r| r.action == c).unwrap().sample_id.clone()))
        .collect();
    OneShotConfig {
        epochs,
        warmup_epochs: 0,
        decay_epochs: vec![],
        novel_classes: novel,
        exemplar_ids,
        train: TrainConfig {
            eval_every: 0,
            encoder: EncoderConfig::desk(),
            ..TrainConfig::default()
        },
        ..OneShotConfig::default()
    }
}

#[test]
fn single_novel_class_is_always_right() {
    let (data, set) = tiny_data(3);
    let cfg = oneshot_config([2].into(), &data, 1);
    let out = run_oneshot(&set, &data.manifest, &SkeletonLayout::humanoid11(), &cfg).unwrap();
    assert_eq!(out.report.accuracy, 1.0);
    assert_eq!(out.report.base_classes, vec![0, 1]);
    assert_eq!(out.exemplar_features.len_of(Axis(0)), 1);
}

#[test]
fn report_counts_are_consistent() {
    let (data, set) = tiny_data(4);
    let cfg = oneshot_config([2, 3].into(), &data, 1);
    let out = run_oneshot(&set, &data.manifest, &SkeletonLayout::humanoid11(), &cfg).unwrap();
    let r = &out.report;
    let per_class = data.manifest.records.iter().filter(|x| x.action == 2).count();
    assert_eq!(r.query_count, 2 * (per_class - 1));
    assert_eq!(r.confusion.iter().flatten().sum::<usize>(), r.query_count);
    let diag: usize = (0..2).map(|i| r.confusion[i][i]).sum();
    assert!((r.sq_euclidean_accuracy - diag as f64 / r.query_count as f64).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&r.cosine_accuracy));
}

#[test]
fn overlapping_base_limit_is_rejected() {
    let (data, set) = tiny_data(3);
    let mut cfg = oneshot_config([2].into(), &data, 1);
    cfg.base_class_limit = Some(3);
    assert!(run_oneshot(&set, &data.manifest, &SkeletonLayout::humanoid11(), &cfg).is_err());
}
