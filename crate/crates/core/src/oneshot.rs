//! One-shot recognition by prototype matching.
//!
//! A model is trained fully supervised on the base classes. Its
//! pre-classifier feature then represents every sample; each novel class is
//! represented by its single exemplar, and a query takes the class of the
//! nearest exemplar.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, SkeletonLayout};
use crate::error::{Error, Result};
use crate::head::Mask;
use crate::model::Model;
use crate::sampler::{build_pair_index, one_shot_split};
use crate::scalar::Scalar;
use crate::train::{fit, top1, RunReport, TensorSet, TrainConfig, TrainMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SqEuclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneShotConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub novel_classes: BTreeSet<usize>,
    pub exemplar_ids: BTreeMap<usize, String>,
    pub distance: Distance,
    /// Train on only the first `m` base classes (by class id).
    pub base_class_limit: Option<usize>,
    /// Remaining training settings; its schedule fields are replaced by the
    /// ones above.
    pub train: TrainConfig,
}

impl Default for OneShotConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            base_lr: 0.1,
            warmup_epochs: 5,
            decay_epochs: vec![10, 15],
            novel_classes: BTreeSet::new(),
            exemplar_ids: BTreeMap::new(),
            distance: Distance::SqEuclidean,
            base_class_limit: None,
            train: TrainConfig::default(),
        }
    }
}

impl OneShotConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            decay_epochs: self.decay_epochs.clone(),
            ..self.train.clone()
        }
    }
}

/// Pre-classifier features of every sample, evaluation mode.
pub fn extract_features<S: Scalar>(model: &Model<S>, set: &TensorSet) -> Result<Array2<S>> {
    extract_features_masked(model, set, Mask::None)
}

pub fn extract_features_masked<S: Scalar>(model: &Model<S>, set: &TensorSet, mask: Mask) -> Result<Array2<S>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Array2::zeros((set.len(), model.feature_width()));
    for (c, chunk) in idx.chunks(64).enumerate() {
        let f = model.features_masked(&set.gather::<S>(chunk), mask)?;
        out.slice_mut(ndarray::s![c * 64..c * 64 + chunk.len(), ..]).assign(&f);
    }
    Ok(out)
}

fn sq_dist<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// Nearest exemplar row for every query, ties to the lowest row. Under the
/// cosine metric a zero-norm query or exemplar makes that query fall back
/// to squared Euclidean distance; the second vector flags those queries.
pub fn protonet_match<S: Scalar>(exemplars: &Array2<S>, queries: &Array2<S>, distance: Distance) -> (Vec<usize>, Vec<bool>) {
    assert_eq!(exemplars.ncols(), queries.ncols(), "feature widths differ");
    let norms: Vec<f64> = exemplars
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut pred = Vec::with_capacity(queries.nrows());
    let mut fallback = Vec::with_capacity(queries.nrows());
    for q in queries.rows() {
        let qn = q.iter().map(|x| x.f64().powi(2)).sum::<f64>().sqrt();
        let cosine = distance == Distance::Cosine && qn > 0.0 && norms.iter().all(|&n| n > 0.0);
        fallback.push(distance == Distance::Cosine && !cosine);
        let mut best = (f64::INFINITY, 0);
        for (j, e) in exemplars.rows().into_iter().enumerate() {
            let score = if cosine {
                let dot: f64 = q.iter().zip(e).map(|(a, b)| a.f64() * b.f64()).sum();
                -dot / (qn * norms[j])
            } else {
                sq_dist(q, e)
            };
            if score < best.0 {
                best = (score, j);
            }
        }
        pred.push(best.1);
    }
    (pred, fallback)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneShotReport {
    /// Top-1 under the configured distance.
    pub accuracy: f64,
    pub sq_euclidean_accuracy: f64,
    pub cosine_accuracy: f64,
    pub distance: Distance,
    pub novel_classes: Vec<usize>,
    pub base_classes: Vec<usize>,
    /// `confusion[i][j]`: queries of novel class `i` predicted as novel class `j`.
    pub confusion: Vec<Vec<usize>>,
    pub fallback_queries: usize,
    pub query_count: usize,
    pub train: RunReport,
}

pub struct OneShotOutcome {
    pub report: OneShotReport,
    pub model: Model<f32>,
    pub exemplar_features: Array2<f32>,
}

/// Runs the whole protocol on `data`, which holds every sample named by
/// `manifest`.
pub fn run_oneshot(
    data: &TensorSet,
    manifest: &DatasetManifest,
    layout: &SkeletonLayout,
    config: &OneShotConfig,
) -> Result<OneShotOutcome> {
    let split = one_shot_split(manifest, &config.novel_classes, &config.exemplar_ids)?;
    let mut base_classes: Vec<usize> = split
        .base_train
        .records
        .iter()
        .map(|r| r.action)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if let Some(m) = config.base_class_limit {
        if m == 0 || m > base_classes.len() {
            return Err(Error::Config(format!(
                "base_class_limit {m} outside 1..={}",
                base_classes.len()
            )));
        }
        base_classes.truncate(m);
    }
    if base_classes.iter().any(|c| config.novel_classes.contains(c)) {
        return Err(Error::Protocol("base and novel classes overlap".into()));
    }
    let keep: BTreeSet<usize> = base_classes.iter().copied().collect();
    let base = DatasetManifest::with_class_count(
        split
            .base_train
            .records
            .iter()
            .filter(|r| keep.contains(&r.action))
            .cloned()
            .collect(),
        manifest.class_count,
    );
    let train_cfg = config.train_config();
    let train_set = data.restrict(&base)?;
    let pairs = (train_cfg.mode == TrainMode::Skeletonx).then(|| build_pair_index(&base, train_cfg.seed));
    let fitted = fit(&train_set, pairs.as_ref(), &train_cfg, layout, None)?;
    let model = fitted.last;

    let ex_set = data.restrict(&split.exemplars)?;
    let q_set = data.restrict(&split.novel_queries)?;
    let ex = extract_features(&model, &ex_set)?;
    let qf = extract_features(&model, &q_set)?;
    let novel: Vec<usize> = ex_set.labels.clone();
    let acc = |rows: &[usize]| top1(&rows.iter().map(|&r| novel[r]).collect::<Vec<_>>(), &q_set.labels);
    let (sq_rows, _) = protonet_match(&ex, &qf, Distance::SqEuclidean);
    let (cos_rows, cos_fallback) = protonet_match(&ex, &qf, Distance::Cosine);
    let (rows, fallback) = match config.distance {
        Distance::SqEuclidean => (sq_rows.clone(), vec![false; sq_rows.len()]),
        Distance::Cosine => (cos_rows.clone(), cos_fallback),
    };
    let mut confusion = vec![vec![0usize; novel.len()]; novel.len()];
    let slot: BTreeMap<usize, usize> = novel.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    for (&y, &r) in q_set.labels.iter().zip(&rows) {
        confusion[slot[&y]][r] += 1;
    }
    Ok(OneShotOutcome {
        report: OneShotReport {
            accuracy: acc(&rows),
            sq_euclidean_accuracy: acc(&sq_rows),
            cosine_accuracy: acc(&cos_rows),
            distance: config.distance,
            novel_classes: novel,
            base_classes,
            confusion,
            fallback_queries: fallback.iter().filter(|&&f| f).count(),
            query_count: q_set.len(),
            train: fitted.report,
        },
        model,
        exemplar_features: ex,
    })
}

/// Feature rows as CSV with a leading sample id and label.
pub fn features_csv<S: Scalar>(ids: &[String], labels: &[usize], features: &Array2<S>) -> String {
    let mut s = String::from("sample_id,label");
    for j in 0..features.ncols() {
        write!(s, ",f{j}").unwrap();
    }
    s.push('\n');
    for ((id, y), row) in ids.iter().zip(labels).zip(features.rows()) {
        write!(s, "{id},{y}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}
