use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skeletonx::backbone::EncoderConfig;
use skeletonx::checkpoint;
use skeletonx::data::SkeletonLayout;
use skeletonx::head::{AggregationStrategy, HeadConfig};
use skeletonx::mi::{estimate_mi, MineConfig};
use skeletonx::model::{HeadKind, Model, ModelConfig};
use skeletonx::objective::one_hot;
use skeletonx::params::{ParamKind, ParamStore};
use skeletonx::sampler::build_pair_index;
use skeletonx::synth::{generate, nearest_centroid_accuracy, SynthConfig};
use skeletonx::train::{baseline_step, fit, skeletonx_step, TensorSet, TrainConfig, TrainMode};

fn model(head: HeadKind, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        encoder: EncoderConfig::desk(),
        head,
        class_count: 4,
        layout: SkeletonLayout::humanoid11(),
    };
    Model::new(cfg, seed).unwrap()
}

/// Largest relative error over a random sample of trainable scalars.
fn check_gradients<F>(m: &Model<f64>, grads: &[(skeletonx::params::ParamId, ndarray::ArrayD<f64>)], loss: F, n: usize) -> f64
where
    F: Fn(&Model<f64>) -> f64,
{
    let mut r = ChaCha8Rng::seed_from_u64(17);
    let mut pool = Vec::new();
    for (id, g) in grads {
        if m.store().entry(*id).kind == ParamKind::Trainable {
            pool.extend((0..g.len()).map(|k| (*id, k)));
        }
    }
    pool.shuffle(&mut r);
    let mut work = m.clone();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &(id, k) in pool.iter().take(n) {
        let set = |w: &mut Model<f64>, v: f64| w.store_mut().value_mut(id).as_slice_mut().unwrap()[k] = v;
        let orig = m.store().value(id).as_slice().unwrap()[k];
        set(&mut work, orig + h);
        let up = loss(&work);
        set(&mut work, orig - h);
        let down = loss(&work);
        set(&mut work, orig);
        let numeric = (up - down) / (2.0 * h);
        let a = grads.iter().find(|(i, _)| *i == id).unwrap().1.as_slice().unwrap()[k];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5));
    }
    worst
}

fn batch(r: &mut ChaCha8Rng, rows: usize) -> Array4<f64> {
    Array4::from_shape_fn((rows, 8, 11, 3), |_| r.random_range(-1.0..1.0))
}

#[test]
fn baseline_gradients_match_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let m = model(HeadKind::Gap, 2);
    let x = batch(&mut r, 3);
    let t: Array2<f64> = one_hot(&[0, 3, 1], 4) * 0.8 + 0.05;
    let (out, _) = baseline_step(&m, &x, &t);
    let worst = check_gradients(&m, &out.grads, |w| baseline_step(w, &x, &t).1.total, 150);
    assert!(worst <= 1e-4, "relative error {worst:.2e}");
}

#[test]
fn alternative_aggregations_have_correct_gradients() {
    for strategy in [AggregationStrategy::Matmul, AggregationStrategy::CrossAttention] {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = model(
            HeadKind::Skeletonx(HeadConfig {
                aggregation: strategy,
                ..HeadConfig::default()
            }),
            4,
        );
        let x = batch(&mut r, 6);
        let (labels, dasp) = ([1, 2], [0, 3]);
        let (out, _) = skeletonx_step(&m, &x, &labels, &dasp, 0.1);
        let worst = check_gradients(&m, &out.grads, |w| skeletonx_step(w, &x, &labels, &dasp, 0.1).1.total, 150);
        assert!(worst <= 1e-4, "{strategy:?}: relative error {worst:.2e}");
    }
}

fn small_run(mode: TrainMode, seed: u64) -> (Vec<u8>, String) {
    let data = generate(&SynthConfig {
        class_count: 3,
        performer_count: 2,
        frames: 16,
        seed: 9,
        ..SynthConfig::default()
    })
    .unwrap();
    let set = TensorSet::new(&data.manifest, &data.sequences).unwrap();
    let pairs = build_pair_index(&data.manifest, seed);
    let cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        decay_epochs: vec![],
        seed,
        mode,
        encoder: EncoderConfig::desk(),
        ..TrainConfig::default()
    };
    let out = fit(&set, Some(&pairs), &cfg, &SkeletonLayout::humanoid11(), Some(&set)).unwrap();
    let report = serde_json::to_string(&out.report.without_wall_time()).unwrap();
    (checkpoint::to_bytes(&out.last), report)
}

#[test]
fn training_is_deterministic_per_seed() {
    for mode in [TrainMode::Skeletonx, TrainMode::BaselineGap, TrainMode::BaselineMixup, TrainMode::BaselineRotation] {
        let a = small_run(mode, 3);
        assert_eq!(a, small_run(mode, 3), "{mode:?}");
        assert_ne!(a.0, small_run(mode, 4).0, "{mode:?}");
    }
}

#[test]
fn synthetic_classes_are_separable() {
    let data = generate(&SynthConfig::default()).unwrap();
    let acc = nearest_centroid_accuracy(&data);
    assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
}

#[test]
fn parameter_store_casts_losslessly_to_wider() {
    let m32 = model(HeadKind::Skeletonx(HeadConfig::default()), 6).cast::<f32>();
    let back: ParamStore<f32> = m32.store().cast::<f64>().cast::<f32>();
    for (a, b) in m32.store().entries().iter().zip(back.entries()) {
        assert_eq!(a.value, b.value);
    }
}

fn mine() -> MineConfig {
    MineConfig {
        steps: 1500,
        ..MineConfig::default()
    }
}

#[test]
fn identical_arms_agree() {
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let labels: Vec<usize> = (0..4000).map(|_| r.random_range(0..4)).collect();
    let f = Array2::from_shape_fn((4000, 4), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 } + r.random_range(-0.3..0.3));
    let a = estimate_mi(&f, &labels, 4, &mine()).unwrap().converged();
    let b = estimate_mi(&f, &labels, 4, &mine()).unwrap().converged();
    assert_eq!(a, b);
    let c = estimate_mi(&f.clone(), &labels, 4, &MineConfig { seed: 1, ..mine() }).unwrap().converged();
    assert!((a - c).abs() < 0.1, "{a} vs {c}");
}

#[test]
fn shuffled_labels_carry_no_information() {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let labels: Vec<usize> = (0..4000).map(|_| r.random_range(0..4)).collect();
    let f = Array2::from_shape_fn((4000, 4), |(i, j)| if labels[i] == j { 1.0 } else { 0.0 });
    let mut shuffled = labels.clone();
    shuffled.shuffle(&mut r);
    let informed = estimate_mi(&f, &labels, 4, &mine()).unwrap().converged();
    let control = estimate_mi(&f, &shuffled, 4, &mine()).unwrap().converged();
    assert!(control.abs() < 0.05, "control {control}");
    assert!(informed > 0.8, "informed {informed}");
}
