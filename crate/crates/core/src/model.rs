//! Encoder, head and classifier bundled over one parameter store.

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{config_hash, Backbone, EncoderConfig, StGcnEncoder};
use crate::data::{argmax_lowest, SkeletonLayout};
use crate::error::{Error, Result};
use crate::head::{softmax_rows, Disentangled, HeadConfig, Mask, SkeletonXHead};
use crate::params::{Dense, Mode, ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    /// Global average pool over time and joints, then the classifier.
    Gap,
    Skeletonx(HeadConfig),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub class_count: usize,
    pub layout: SkeletonLayout,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.layout.validate()?;
        if self.class_count == 0 {
            return Err(Error::Config("class_count must be positive".into()));
        }
        if let HeadKind::Skeletonx(HeadConfig {
            projection_channels: Some(0),
            ..
        }) = self.head
        {
            return Err(Error::Config("projection_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Trainable scalar counts per model part.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub encoder: usize,
    pub skeletonx_head: usize,
    pub classifier: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.encoder + self.skeletonx_head + self.classifier
    }
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    store: ParamStore<S>,
    encoder: StGcnEncoder<S>,
    head: Option<SkeletonXHead>,
    classifier: Dense,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = StGcnEncoder::new(&config.encoder, &config.layout, &mut store, &mut rng)?;
        let c = encoder.out_channels();
        let (head, width) = match &config.head {
            HeadKind::Gap => (None, c),
            HeadKind::Skeletonx(hc) => {
                let h = SkeletonXHead::new(hc, c, &mut store, &mut rng);
                let w = h.projection_channels();
                (Some(h), w)
            }
        };
        let classifier = Dense::new(&mut store, "classifier", width, config.class_count, true, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            head,
            classifier,
        })
    }

    /// Rebuilds the model structure and adopts `store`, which must hold the
    /// same named tensors in registration order.
    pub fn with_store(config: ModelConfig, store: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let fresh = model.store.entries();
        let given = store.entries();
        if fresh.len() != given.len() {
            return Err(Error::Shape(format!(
                "model has {} tensors, store has {}",
                fresh.len(),
                given.len()
            )));
        }
        for (a, b) in fresh.iter().zip(given) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.kind != b.kind {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model::with_store(self.config.clone(), self.store.cast()).expect("same structure")
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn encoder(&self) -> &StGcnEncoder<S> {
        &self.encoder
    }

    pub fn head(&self) -> Option<&SkeletonXHead> {
        self.head.as_ref()
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    /// Width of the pre-classifier feature.
    pub fn feature_width(&self) -> usize {
        self.classifier.inputs
    }

    pub fn count_parameters(&self) -> ParameterCount {
        ParameterCount {
            encoder: self.store.count_trainable("encoder."),
            skeletonx_head: self.store.count_trainable("head."),
            classifier: self.store.count_trainable("classifier."),
        }
    }

    pub fn check_batch(&self, batch: &Array4<S>) -> Result<()> {
        let (n, t, v, d) = batch.dim();
        if n == 0 || t == 0 || v != self.config.layout.joint_count || d != 3 {
            return Err(Error::Shape(format!(
                "expected N×T×{}×3 input, got {:?}",
                self.config.layout.joint_count,
                batch.dim()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, sess: &mut Session<'_, S>, x: Var) -> Var {
        self.encoder.encode(sess, x)
    }

    /// Mean of `F_e` over time and joints, `N × C`.
    pub fn gap(&self, sess: &mut Session<'_, S>, fe: Var) -> Var {
        let x = sess.tape.mean_axis(fe, 1);
        sess.tape.mean_axis(x, 1)
    }

    pub fn logits(&self, sess: &mut Session<'_, S>, feature: Var) -> Var {
        self.classifier.forward(sess, feature)
    }

    /// Pre-classifier feature of the inference path: the intra-sample
    /// aggregate under a SkeletonX head, the pooled encoding otherwise.
    pub fn feature(&self, sess: &mut Session<'_, S>, x: Var, mask: Mask) -> Var {
        let fe = self.encode(sess, x);
        match &self.head {
            Some(h) => h.intra(sess, fe, mask),
            None => self.gap(sess, fe),
        }
    }

    pub fn disentangle(&self, sess: &mut Session<'_, S>, fe: Var) -> Option<Disentangled> {
        self.head.as_ref().map(|h| h.disentangle(sess, fe))
    }

    fn eval_feature(&self, batch: &Array4<S>, mask: Mask) -> Array2<S> {
        let mut sess = Session::new(&self.store, Mode::Eval);
        let x = sess.input(batch.clone().into_dyn());
        let f = self.feature(&mut sess, x, mask);
        sess.tape.value(f).clone().into_dimensionality().expect("2-d feature")
    }

    /// Class probabilities for each row, evaluation mode.
    pub fn infer(&self, batch: &Array4<S>) -> Result<Array2<S>> {
        self.infer_masked(batch, Mask::None)
    }

    pub fn infer_masked(&self, batch: &Array4<S>, mask: Mask) -> Result<Array2<S>> {
        self.check_batch(batch)?;
        if mask != Mask::None && self.head.is_none() {
            return Err(Error::Invalid("masking needs a SkeletonX head".into()));
        }
        let mut sess = Session::new(&self.store, Mode::Eval);
        let x = sess.input(batch.clone().into_dyn());
        let f = self.feature(&mut sess, x, mask);
        let z = self.logits(&mut sess, f);
        let z: Array2<S> = sess.tape.value(z).clone().into_dimensionality().expect("2-d logits");
        Ok(softmax_rows(&z))
    }

    /// Argmax class per row with ties to the lowest index.
    pub fn predict(&self, batch: &Array4<S>, mask: Mask) -> Result<Vec<usize>> {
        let p = self.infer_masked(batch, mask)?;
        Ok(p.axis_iter(Axis(0)).map(|r| argmax_lowest(r.iter().copied())).collect())
    }

    /// Cross-sample aggregated features: row `i` combines the spatial part
    /// of `spatial_from[i]` with the temporal part of `temporal_from[i]`.
    pub fn pair_features(&self, spatial_from: &Array4<S>, temporal_from: &Array4<S>, mask: Mask) -> Result<Array2<S>> {
        self.check_batch(spatial_from)?;
        self.check_batch(temporal_from)?;
        if spatial_from.dim() != temporal_from.dim() {
            return Err(Error::Shape(format!("{:?} vs {:?}", spatial_from.dim(), temporal_from.dim())));
        }
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Invalid("pair aggregation needs a SkeletonX head".into()))?;
        let mut sess = Session::new(&self.store, Mode::Eval);
        let a = sess.input(spatial_from.clone().into_dyn());
        let b = sess.input(temporal_from.clone().into_dyn());
        let fa = self.encode(&mut sess, a);
        let fb = self.encode(&mut sess, b);
        let da = head.disentangle(&mut sess, fa);
        let db = head.disentangle(&mut sess, fb);
        let v = head.aggregate(&mut sess, &da, &db, mask);
        Ok(sess.tape.value(v).clone().into_dimensionality().expect("2-d feature"))
    }

    /// The feature feeding the classifier, `N × feature_width`.
    pub fn features(&self, batch: &Array4<S>) -> Result<Array2<S>> {
        self.features_masked(batch, Mask::None)
    }

    pub fn features_masked(&self, batch: &Array4<S>, mask: Mask) -> Result<Array2<S>> {
        self.check_batch(batch)?;
        if mask != Mask::None && self.head.is_none() {
            return Err(Error::Invalid("masking needs a SkeletonX head".into()));
        }
        Ok(self.eval_feature(batch, mask))
    }

    /// Globally pooled encoder feature `F`, `N × C`, for either head kind.
    pub fn pooled_encoding(&self, batch: &Array4<S>) -> Result<Array2<S>> {
        self.check_batch(batch)?;
        let mut sess = Session::new(&self.store, Mode::Eval);
        let x = sess.input(batch.clone().into_dyn());
        let fe = self.encode(&mut sess, x);
        let g = self.gap(&mut sess, fe);
        Ok(sess.tape.value(g).clone().into_dimensionality().expect("2-d"))
    }
}
