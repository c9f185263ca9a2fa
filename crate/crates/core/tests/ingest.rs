use ndarray::Array3;
use proptest::prelude::*;

use skeletonx::data::{SkeletonLayout, SkeletonSequence};
use skeletonx::ingest::{is_empty_frame, preprocess, to_bone, PreprocessConfig};

/// Frames with a per-frame flag that blanks the frame.
fn sequence() -> impl Strategy<Value = Array3<f32>> {
    (1usize..30, 1usize..6).prop_flat_map(|(t, v)| {
        (prop::collection::vec(0.1f32..3.0, t * v * 3), prop::collection::vec(any::<bool>(), t)).prop_map(
            move |(xs, blank)| {
                let mut a = Array3::from_shape_vec((t, v, 3), xs).unwrap();
                if blank.iter().all(|&b| b) {
                    return a;
                }
                for (i, &b) in blank.iter().enumerate() {
                    if b {
                        a.index_axis_mut(ndarray::Axis(0), i).fill(0.0);
                    }
                }
                a
            },
        )
    })
}

fn reference_resize(frames: &[Vec<f64>], target: usize) -> Vec<Vec<f64>> {
    let n = frames.len();
    (0..target)
        .map(|i| {
            if n == 1 || target == 1 {
                return frames[0].clone();
            }
            let pos = i as f64 * (n - 1) as f64 / (target - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let w = pos - lo as f64;
            frames[lo].iter().zip(&frames[hi]).map(|(a, b)| a * (1.0 - w) + b * w).collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn preprocess_matches_reference_interpolation(c in sequence(), target in 2usize..40) {
        let seq = SkeletonSequence::from_coords(c.clone()).unwrap();
        let cfg = PreprocessConfig { target_frames: target, ..PreprocessConfig::default() };
        let kept: Vec<Vec<f64>> = c
            .outer_iter()
            .filter(|f| f.iter().any(|x| x.abs() as f64 >= cfg.empty_frame_epsilon))
            .map(|f| f.iter().map(|&x| x as f64).collect())
            .collect();
        let out = preprocess(&seq, &cfg).unwrap();
        prop_assert_eq!(out.frame_count(), target);
        let want = reference_resize(&kept, target);
        for (t, f) in out.coords().outer_iter().enumerate() {
            for (got, w) in f.iter().zip(&want[t]) {
                prop_assert!((*got as f64 - w).abs() < 1e-4, "frame {}: {} vs {}", t, got, w);
            }
        }
        for t in 0..target {
            prop_assert!(!is_empty_frame(&out, t, cfg.empty_frame_epsilon));
        }
    }

    #[test]
    fn preprocess_is_idempotent_on_clean_input(c in sequence(), target in 1usize..40) {
        let cfg = PreprocessConfig { target_frames: target, ..PreprocessConfig::default() };
        let once = preprocess(&SkeletonSequence::from_coords(c).unwrap(), &cfg).unwrap();
        let twice = preprocess(&once, &cfg).unwrap();
        prop_assert_eq!(once.coords(), twice.coords());
    }

    #[test]
    fn bones_ignore_translation(seed in 0u64..1000, dx in -5.0f32..5.0, dy in -5.0f32..5.0, dz in -5.0f32..5.0) {
        let layout = SkeletonLayout::humanoid11();
        let c = Array3::from_shape_fn((4, layout.joint_count, 3), |(t, v, k)| ((seed as usize + 7 * t + 3 * v + k) % 11) as f32 * 0.1);
        let mut moved = c.clone();
        for mut f in moved.outer_iter_mut() {
            for mut j in f.outer_iter_mut() {
                j[0] += dx;
                j[1] += dy;
                j[2] += dz;
            }
        }
        let a = to_bone(&SkeletonSequence::from_coords(c).unwrap(), &layout).unwrap();
        let b = to_bone(&SkeletonSequence::from_coords(moved).unwrap(), &layout).unwrap();
        for (x, y) in a.coords().iter().zip(b.coords()) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn bones_match_edge_walk_on_random_trees(parents in prop::collection::vec(0usize..100, 1..8), seed in 0u64..100) {
        // joint i+1 hangs from some earlier joint
        let edges: Vec<(usize, usize)> = parents.iter().enumerate().map(|(i, &p)| (p % (i + 1), i + 1)).collect();
        let v = parents.len() + 1;
        let layout = SkeletonLayout::new("tree", v, 0, &edges).unwrap();
        let c = Array3::from_shape_fn((3, v, 3), |(t, j, k)| ((seed as usize * 13 + t * 5 + j * 3 + k) % 17) as f32 - 8.0);
        let bones = to_bone(&SkeletonSequence::new(c.clone(), "tree").unwrap(), &layout).unwrap();
        let b = bones.coords();
        for t in 0..3 {
            for k in 0..3 {
                prop_assert_eq!(b[[t, 0, k]], 0.0);
            }
            for &(p, ch) in &edges {
                for k in 0..3 {
                    prop_assert_eq!(b[[t, ch, k]], c[[t, ch, k]] - c[[t, p, k]]);
                }
            }
        }
    }
}
