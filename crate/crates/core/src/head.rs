//! Disentanglement and aggregation head.
//!
//! The encoded feature `F_e` (`N × T′ × V × C`) is split into
//!
//! * a spatial, performer-related feature `F_s = ReLU(BN(w_s ⊙ mean_t F_e + b_s))`
//!   of shape `N × V × C`, and
//! * a temporal, action-related feature `F_t = ReLU(BN(w_t ⊙ mean_v F_e + b_t))`
//!   of shape `N × T′ × C`,
//!
//! with per-channel scale/shift vectors and parameter-free batch norms. Two
//! disentangled features, possibly from different samples, are aggregated
//! into one vector of width `C_p`; with the default concatenation strategy
//! that is `W_p · [mean_v F_s ; mean_t F_t] + b_p`. The label of an aggregated
//! feature is the action of the sample that supplied `F_t`.


use ndarray::{s, Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelDistribution;
use crate::params::{BatchNorm, Dense, Mode, ParamId, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    #[default]
    Concat,
    /// Channel-wise product of the pooled spatial and temporal vectors,
    /// then the projection.
    Matmul,
    /// Temporal feature as query, spatial feature as key and value.
    CrossAttention,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Width `C_p` of the aggregated feature; half the encoder width if unset.
    pub projection_channels: Option<usize>,
    pub aggregation: AggregationStrategy,
}

/// Which half of the aggregated representation to suppress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    None,
    /// Zero the temporal (action-related) half.
    Action,
    /// Zero the spatial (performer-related) half.
    Performer,
    Both,
}

impl Mask {
    fn drops_temporal(self) -> bool {
        matches!(self, Mask::Action | Mask::Both)
    }

    fn drops_spatial(self) -> bool {
        matches!(self, Mask::Performer | Mask::Both)
    }
}

/// Tape handles of one batch's disentangled features.
#[derive(Clone, Copy, Debug)]
pub struct Disentangled {
    /// `N × V × C`
    pub spatial: Var,
    /// `N × T′ × C`
    pub temporal: Var,
}

/// One sample's disentangled features.
#[derive(Clone, Debug, PartialEq)]
pub struct DisentangledPair<S> {
    pub sample_id: String,
    /// `V × C`
    pub spatial: Array2<S>,
    /// `T′ × C`
    pub temporal: Array2<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedFeature<S> {
    pub vector: Array1<S>,
    /// Sample that supplied the temporal feature, and therefore the label.
    pub action_source: String,
    pub performer_source: String,
}

#[derive(Clone, Debug)]
enum Aggregator {
    Concat {
        projection: Dense,
    },
    Matmul {
        projection: Dense,
    },
    CrossAttention {
        query: Dense,
        key: Dense,
        value: Dense,
        projection: Dense,
    },
}

#[derive(Clone, Debug)]
pub struct SkeletonXHead {
    channels: usize,
    projection_channels: usize,
    pub spatial_scale: ParamId,
    pub spatial_shift: ParamId,
    pub spatial_norm: BatchNorm,
    pub temporal_scale: ParamId,
    pub temporal_shift: ParamId,
    pub temporal_norm: BatchNorm,
    aggregator: Aggregator,
    strategy: AggregationStrategy,
}

impl SkeletonXHead {
    /// Registers head parameters under `head.`; scales start at one, shifts
    /// at zero.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        config: &HeadConfig,
        channels: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Self {
        let cp = config.projection_channels.unwrap_or((channels / 2).max(1));
        let ones = || ArrayD::<S>::ones(IxDyn(&[channels]));
        let zeros = || ArrayD::<S>::zeros(IxDyn(&[channels]));
        let spatial_scale = store.trainable("head.spatial.scale", ones());
        let spatial_shift = store.trainable("head.spatial.shift", zeros());
        let spatial_norm = BatchNorm::new(store, "head.spatial_norm", channels, false);
        let temporal_scale = store.trainable("head.temporal.scale", ones());
        let temporal_shift = store.trainable("head.temporal.shift", zeros());
        let temporal_norm = BatchNorm::new(store, "head.temporal_norm", channels, false);
        let aggregator = match config.aggregation {
            AggregationStrategy::Concat => Aggregator::Concat {
                projection: Dense::new(store, "head.projection", 2 * channels, cp, true, rng),
            },
            AggregationStrategy::Matmul => Aggregator::Matmul {
                projection: Dense::new(store, "head.projection", channels, cp, true, rng),
            },
            AggregationStrategy::CrossAttention => Aggregator::CrossAttention {
                query: Dense::new(store, "head.attn.query", channels, channels, false, rng),
                key: Dense::new(store, "head.attn.key", channels, channels, false, rng),
                value: Dense::new(store, "head.attn.value", channels, channels, false, rng),
                projection: Dense::new(store, "head.projection", channels, cp, true, rng),
            },
        };
        Self {
            channels,
            projection_channels: cp,
            spatial_scale,
            spatial_shift,
            spatial_norm,
            temporal_scale,
            temporal_shift,
            temporal_norm,
            aggregator,
            strategy: config.aggregation,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn projection_channels(&self) -> usize {
        self.projection_channels
    }

    pub fn strategy(&self) -> AggregationStrategy {
        self.strategy
    }

    /// Projection weight `W_p` and bias `b_p`.
    pub fn projection(&self) -> (ParamId, ParamId) {
        let p = match &self.aggregator {
            Aggregator::Concat { projection }
            | Aggregator::Matmul { projection }
            | Aggregator::CrossAttention { projection, .. } => projection,
        };
        (p.weight, p.bias.expect("projection has a bias"))
    }

    /// `F_s`: temporal average pool, per-channel affine, batch norm, ReLU.
    pub fn refine_spatial<S: Scalar>(&self, sess: &mut Session<'_, S>, fe: Var) -> Var {
        let pooled = sess.tape.mean_axis(fe, 1);
        self.refine(sess, pooled, self.spatial_scale, self.spatial_shift, &self.spatial_norm)
    }

    /// `F_t`: joint average pool, per-channel affine, batch norm, ReLU.
    pub fn refine_temporal<S: Scalar>(&self, sess: &mut Session<'_, S>, fe: Var) -> Var {
        let pooled = sess.tape.mean_axis(fe, 2);
        self.refine(sess, pooled, self.temporal_scale, self.temporal_shift, &self.temporal_norm)
    }

    fn refine<S: Scalar>(
        &self,
        sess: &mut Session<'_, S>,
        pooled: Var,
        scale: ParamId,
        shift: ParamId,
        norm: &BatchNorm,
    ) -> Var {
        let w = sess.param(scale);
        let b = sess.param(shift);
        let x = sess.tape.mul_channel(pooled, w);
        let x = sess.tape.add_channel(x, b);
        let x = norm.forward(sess, x);
        sess.tape.relu(x)
    }

    pub fn disentangle<S: Scalar>(&self, sess: &mut Session<'_, S>, fe: Var) -> Disentangled {
        Disentangled {
            spatial: self.refine_spatial(sess, fe),
            temporal: self.refine_temporal(sess, fe),
        }
    }

    /// Aggregates the spatial feature of `spatial_from` with the temporal
    /// feature of `temporal_from`, row by row. Returns `N × C_p`.
    pub fn aggregate<S: Scalar>(
        &self,
        sess: &mut Session<'_, S>,
        spatial_from: &Disentangled,
        temporal_from: &Disentangled,
        mask: Mask,
    ) -> Var {
        let mut fs = spatial_from.spatial;
        let mut ft = temporal_from.temporal;
        if mask.drops_spatial() {
            let z = ArrayD::zeros(IxDyn(sess.tape.shape(fs)));
            fs = sess.input(z);
        }
        if mask.drops_temporal() {
            let z = ArrayD::zeros(IxDyn(sess.tape.shape(ft)));
            ft = sess.input(z);
        }
        match &self.aggregator {
            Aggregator::Concat { projection } => {
                let ps = sess.tape.mean_axis(fs, 1);
                let pt = sess.tape.mean_axis(ft, 1);
                let cat = sess.tape.concat_last(ps, pt);
                projection.forward(sess, cat)
            }
            Aggregator::Matmul { projection } => {
                let ps = sess.tape.mean_axis(fs, 1);
                let pt = sess.tape.mean_axis(ft, 1);
                let prod = sess.tape.mul(ps, pt);
                projection.forward(sess, prod)
            }
            Aggregator::CrossAttention {
                query,
                key,
                value,
                projection,
            } => {
                let q = query.forward(sess, ft);
                let k = key.forward(sess, fs);
                let v = value.forward(sess, fs);
                let scores = sess.tape.bmm(q, k, true);
                let scores = sess.tape.scale(scores, S::one() / S::of(self.channels as f64).sqrt());
                let attn = sess.tape.softmax(scores);
                let out = sess.tape.bmm(attn, v, false);
                let pooled = sess.tape.mean_axis(out, 1);
                projection.forward(sess, pooled)
            }
        }
    }

    /// Intra-sample aggregation of every row of `fe`.
    pub fn intra<S: Scalar>(&self, sess: &mut Session<'_, S>, fe: Var, mask: Mask) -> Var {
        let d = self.disentangle(sess, fe);
        self.aggregate(sess, &d, &d, mask)
    }

    /// Array-level refinement of an encoded batch.
    pub fn disentangle_batch<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        fe: &Array4<S>,
        mode: Mode,
        sample_ids: &[String],
    ) -> Vec<DisentangledPair<S>> {
        assert_eq!(sample_ids.len(), fe.dim().0, "one id per batch row");
        let mut sess = Session::new(store, mode);
        let x = sess.input(fe.clone().into_dyn());
        let d = self.disentangle(&mut sess, x);
        let sp: Array3<S> = sess.tape.value(d.spatial).clone().into_dimensionality().unwrap();
        let tp: Array3<S> = sess.tape.value(d.temporal).clone().into_dimensionality().unwrap();
        sample_ids
            .iter()
            .enumerate()
            .map(|(i, id)| DisentangledPair {
                sample_id: id.clone(),
                spatial: sp.index_axis(Axis(0), i).to_owned(),
                temporal: tp.index_axis(Axis(0), i).to_owned(),
            })
            .collect()
    }

    /// Array-level aggregation of one sample pair.
    pub fn aggregate_pair<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        spatial_from: &DisentangledPair<S>,
        temporal_from: &DisentangledPair<S>,
        mask: Mask,
    ) -> AggregatedFeature<S> {
        assert_eq!(
            spatial_from.spatial.ncols(),
            temporal_from.temporal.ncols(),
            "channel widths differ"
        );
        let mut sess = Session::new(store, Mode::Eval);
        let fs = sess.input(spatial_from.spatial.clone().insert_axis(Axis(0)).into_dyn());
        let ft = sess.input(temporal_from.temporal.clone().insert_axis(Axis(0)).into_dyn());
        let a = Disentangled { spatial: fs, temporal: fs };
        let b = Disentangled { spatial: ft, temporal: ft };
        let v = self.aggregate(&mut sess, &a, &b, mask);
        let vector = sess.tape.value(v).slice(s![0, ..]).to_owned();
        AggregatedFeature {
            vector,
            action_source: temporal_from.sample_id.clone(),
            performer_source: spatial_from.sample_id.clone(),
        }
    }
}

/// Softmax of the classifier's logits for one aggregated feature.
pub fn classify<S: Scalar>(store: &ParamStore<S>, classifier: &Dense, v: &AggregatedFeature<S>) -> LabelDistribution<S> {
    let mut sess = Session::new(store, Mode::Eval);
    let x = sess.input(v.vector.clone().insert_axis(Axis(0)).into_dyn());
    let logits = classifier.forward(&mut sess, x);
    let probs = sess.tape.softmax(logits);
    let row = sess.tape.value(probs).slice(s![0, ..]).to_owned();
    LabelDistribution::new(row).expect("softmax output is a distribution")
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|z| (z - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|z| z / sum);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(channels: usize, cp: usize) -> (SkeletonXHead, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            projection_channels: Some(cp),
            aggregation: AggregationStrategy::Concat,
        };
        let h = SkeletonXHead::new(&cfg, channels, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (h, store)
    }

    /// Running statistics that make eval-mode normalisation exactly the identity.
    fn freeze_identity(h: &SkeletonXHead, store: &mut ParamStore<f64>) {
        for norm in [&h.spatial_norm, &h.temporal_norm] {
            store.value_mut(norm.running_mean).fill(0.0);
            store.value_mut(norm.running_var).fill(1.0 - norm.eps);
        }
    }

    #[test]
    fn constant_over_time_gives_relu_of_value() {
        let (h, mut store) = head(2, 2);
        freeze_identity(&h, &mut store);
        let mut fe = Array4::<f64>::zeros((1, 3, 2, 2));
        for t in 0..3 {
            fe[[0, t, 0, 0]] = 0.5;
            fe[[0, t, 0, 1]] = -0.25;
            fe[[0, t, 1, 0]] = 2.0;
            fe[[0, t, 1, 1]] = 0.0;
        }
        let d = h.disentangle_batch(&store, &fe, Mode::Eval, &["a".into()]);
        let expected = ndarray::arr2(&[[0.5, 0.0], [2.0, 0.0]]);
        for (x, y) in d[0].spatial.iter().zip(expected.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_and_shift_give_zero() {
        let (h, mut store) = head(3, 2);
        freeze_identity(&h, &mut store);
        for id in [h.spatial_scale, h.spatial_shift, h.temporal_scale, h.temporal_shift] {
            store.value_mut(id).fill(0.0);
        }
        let fe = Array4::from_shape_fn((2, 4, 5, 3), |(a, b, c, d)| (a + b * c) as f64 - d as f64);
        let d = h.disentangle_batch(&store, &fe, Mode::Eval, &["a".into(), "b".into()]);
        assert!(d.iter().all(|p| p.spatial.iter().chain(p.temporal.iter()).all(|&x| x == 0.0)));
    }

    #[test]
    fn zero_features_project_to_bias() {
        let (h, mut store) = head(2, 3);
        let (_, b) = h.projection();
        store.value_mut(b).assign(&ndarray::arr1(&[0.1, -0.2, 0.3]).into_dyn());
        let z = DisentangledPair {
            sample_id: "z".into(),
            spatial: Array2::zeros((4, 2)),
            temporal: Array2::zeros((5, 2)),
        };
        let v = h.aggregate_pair(&store, &z, &z, Mask::None);
        assert_eq!(v.vector.to_vec(), vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn selecting_projection_returns_pooled_spatial() {
        let (h, mut store) = head(2, 2);
        let (w, _) = h.projection();
        // weights are [2C, C_p]; the first C rows read the spatial half
        let mut wp = Array2::<f64>::zeros((4, 2));
        wp[[0, 0]] = 1.0;
        wp[[1, 1]] = 1.0;
        *store.value_mut(w) = wp.into_dyn();
        let p = DisentangledPair {
            sample_id: "a".into(),
            spatial: ndarray::arr2(&[[1.0, 2.0], [3.0, 6.0]]),
            temporal: ndarray::arr2(&[[9.0, 9.0], [7.0, 7.0], [8.0, 8.0]]),
        };
        let v = h.aggregate_pair(&store, &p, &p, Mask::None);
        assert_eq!(v.vector.to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn source_tags_follow_branches() {
        let (h, store) = head(2, 2);
        let a = DisentangledPair {
            sample_id: "a".into(),
            spatial: Array2::ones((3, 2)),
            temporal: Array2::ones((2, 2)),
        };
        let mut b = a.clone();
        b.sample_id = "b".into();
        let v = h.aggregate_pair(&store, &a, &b, Mask::None);
        assert_eq!(v.action_source, "b");
        assert_eq!(v.performer_source, "a");
    }

    #[test]
    fn zero_classifier_is_uniform_and_shift_invariant() {
        let mut store = ParamStore::<f64>::new();
        let cls = Dense::new(&mut store, "classifier", 3, 4, true, &mut ChaCha8Rng::seed_from_u64(1));
        store.value_mut(cls.weight).fill(0.0);
        let v = AggregatedFeature {
            vector: Array1::zeros(3),
            action_source: "a".into(),
            performer_source: "a".into(),
        };
        let d = classify(&store, &cls, &v);
        assert!(d.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));

        let logits: Array2<f64> = ndarray::arr2(&[[0.3, -1.2, 2.0, 0.0]]);
        let shifted = logits.mapv(|z| z + 17.5);
        let (p, q) = (softmax_rows(&logits), softmax_rows(&shifted));
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_change_only_their_half() {
        let (h, store) = head(2, 2);
        let p = DisentangledPair {
            sample_id: "a".into(),
            spatial: ndarray::arr2(&[[1.0, 2.0]]),
            temporal: ndarray::arr2(&[[3.0, 4.0]]),
        };
        let none = h.aggregate_pair(&store, &p, &p, Mask::None);
        let both = h.aggregate_pair(&store, &p, &p, Mask::Both);
        let (_, b) = h.projection();
        assert_eq!(both.vector.to_vec(), store.value(b).iter().copied().collect::<Vec<_>>());
        assert_ne!(none.vector, both.vector);
    }

    #[test]
    fn alternative_strategies_have_expected_widths() {
        for strategy in [AggregationStrategy::Matmul, AggregationStrategy::CrossAttention] {
            let mut store = ParamStore::<f64>::new();
            let cfg = HeadConfig {
                projection_channels: Some(3),
                aggregation: strategy,
            };
            let h = SkeletonXHead::new(&cfg, 4, &mut store, &mut ChaCha8Rng::seed_from_u64(2));
            let fe = Array4::from_shape_fn((2, 3, 5, 4), |(a, b, c, d)| ((a + 2 * b + 3 * c + d) % 5) as f64 * 0.3);
            let mut sess = Session::new(&store, Mode::Train);
            let x = sess.input(fe.into_dyn());
            let v = h.intra(&mut sess, x, Mask::None);
            assert_eq!(sess.tape.shape(v), &[2, 3]);
        }
    }
}
