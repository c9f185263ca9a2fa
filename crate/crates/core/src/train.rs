//! Supervised training, evaluation and baseline augmentations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::backbone::{config_hash, EncoderConfig};
use crate::data::{DatasetManifest, SkeletonLayout, SkeletonSequence};
use crate::error::{Error, Result};
use crate::head::{Disentangled, HeadConfig, Mask};
use crate::model::{HeadKind, Model, ModelConfig};
use crate::objective::{composite_loss, one_hot, LossBreakdown, StepLogits};
use crate::optim::Sgd;
use crate::params::{Mode, Session};
use crate::sampler::PairIndex;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Skeletonx,
    BaselineGap,
    BaselineMixup,
    BaselineRotation,
}

impl TrainMode {
    pub fn head(self, head: &HeadConfig) -> HeadKind {
        match self {
            TrainMode::Skeletonx => HeadKind::Skeletonx(head.clone()),
            _ => HeadKind::Gap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// 32 in SkeletonX mode and 64 otherwise when unset.
    pub batch_size: Option<usize>,
    pub w_x: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub rotation_theta: f64,
    pub mixup_alpha: f64,
    /// Evaluate on the held-out set every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 65,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0004,
            warmup_epochs: 5,
            decay_epochs: vec![35, 55],
            decay_factor: 0.1,
            batch_size: None,
            w_x: 0.1,
            seed: 0,
            mode: TrainMode::Skeletonx,
            rotation_theta: 0.3,
            mixup_alpha: 0.2,
            eval_every: 1,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    /// CPU-sized preset: the small encoder, evaluation after the last epoch
    /// only, and a SkeletonX schedule that keeps the seven-term loss stable.
    /// The SkeletonX learning rate is a fifth of the baseline's with weight
    /// decay raised fivefold, so `lr · weight_decay` matches the baseline.
    pub fn desk(mode: TrainMode, seed: u64) -> Self {
        let base = Self {
            seed,
            mode,
            eval_every: 0,
            encoder: EncoderConfig::desk(),
            ..Self::default()
        };
        match mode {
            TrainMode::Skeletonx => Self {
                base_lr: 0.02,
                weight_decay: 0.002,
                w_x: 1.0,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config("warmup_epochs must be below epochs".into()));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e == 0 || e > self.epochs) {
            return Err(Error::Config(format!("decay epoch {e} outside 1..={}", self.epochs)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.w_x.is_finite() || self.w_x < 0.0 {
            return Err(Error::Config("base_lr must be positive and w_x non-negative".into()));
        }
        if !(self.mixup_alpha > 0.0) || self.rotation_theta < 0.0 {
            return Err(Error::Config("mixup_alpha must be positive and rotation_theta non-negative".into()));
        }
        self.encoder.validate()
    }

    pub fn effective_batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.mode {
            TrainMode::Skeletonx => 32,
            _ => 64,
        })
    }

    pub fn model_config(&self, class_count: usize, layout: SkeletonLayout) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            head: self.mode.head(&self.head),
            class_count,
            layout,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Learning rate for 1-based `epoch`: linear warmup from
/// `base_lr / warmup_epochs`, then one `decay_factor` per decay epoch passed.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_epochs > 0 && epoch <= cfg.warmup_epochs {
        return cfg.base_lr * epoch.max(1) as f64 / cfg.warmup_epochs as f64;
    }
    let passed = cfg.decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.base_lr * cfg.decay_factor.powi(passed as i32)
}

/// Preprocessed sequences stacked in manifest order.
#[derive(Clone, Debug)]
pub struct TensorSet {
    pub manifest: DatasetManifest,
    /// `N × T × V × 3`
    pub tensor: Array4<f32>,
    pub labels: Vec<usize>,
}

impl TensorSet {
    pub fn new(manifest: &DatasetManifest, sequences: &BTreeMap<String, SkeletonSequence>) -> Result<Self> {
        if manifest.records.is_empty() {
            return Err(Error::Invalid("empty manifest".into()));
        }
        let seqs = manifest
            .records
            .iter()
            .map(|r| {
                sequences
                    .get(&r.sample_id)
                    .ok_or_else(|| Error::Invalid(format!("no sequence for {}", r.sample_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let tensor = crate::backbone::stack_batch::<f32>(&seqs)?;
        Ok(Self {
            manifest: manifest.clone(),
            labels: manifest.records.iter().map(|r| r.action).collect(),
            tensor,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather<S: Scalar>(&self, rows: &[usize]) -> Array4<S> {
        self.tensor.select(Axis(0), rows).mapv(|x| S::of(x as f64))
    }

    /// Subset in the order of `rows`.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            manifest: DatasetManifest::with_class_count(
                rows.iter().map(|&i| self.manifest.records[i].clone()).collect(),
                self.manifest.class_count,
            ),
            tensor: self.tensor.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows whose sample ids appear in `manifest`, in its order.
    pub fn restrict(&self, manifest: &DatasetManifest) -> Result<Self> {
        let pos: BTreeMap<&str, usize> = self
            .manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.sample_id.as_str(), i))
            .collect();
        let rows = manifest
            .records
            .iter()
            .map(|r| {
                pos.get(r.sample_id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("unknown sample {}", r.sample_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut s = self.subset(&rows);
        s.manifest.class_count = manifest.class_count;
        Ok(s)
    }
}

/// Rotation matrix `Rz(c) · Ry(b) · Rx(a)`.
pub fn rotation_matrix(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    [
        [cc * cb, cc * sb * sa - sc * ca, cc * sb * ca + sc * sa],
        [sc * cb, sc * sb * sa + cc * ca, sc * sb * ca - cc * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

/// Rotates every sequence of the batch by its own random rotation with
/// per-axis angles uniform in `[−θ, θ]`.
pub fn augment_rotation<S: Scalar, R: Rng + ?Sized>(batch: &mut Array4<S>, theta: f64, rng: &mut R) {
    if theta == 0.0 {
        return;
    }
    for mut seq in batch.outer_iter_mut() {
        let mut angle = || rng.random_range(-theta..=theta);
        let m = rotation_matrix(angle(), angle(), angle()).map(|r| r.map(S::of));
        for mut p in seq.rows_mut() {
            let (x, y, z) = (p[0], p[1], p[2]);
            for k in 0..3 {
                p[k] = m[k][0] * x + m[k][1] * y + m[k][2] * z;
            }
        }
    }
}

/// `λ·a + (1 − λ)·b` for sequences and label rows alike.
pub fn mixup<S: Scalar>(a: &Array4<S>, ta: &Array2<S>, b: &Array4<S>, tb: &Array2<S>, lambda: f64) -> (Array4<S>, Array2<S>) {
    let (l, m) = (S::of(lambda), S::of(1.0 - lambda));
    (a * l + b * m, ta * l + tb * m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    /// Per-component means over the epoch's steps.
    pub loss: LossBreakdown,
    pub eval_top1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub config_hash: String,
    pub model_hash: String,
    pub train_samples: usize,
    pub epochs: Vec<EpochSummary>,
    pub final_top1: Option<f64>,
    pub best_top1: Option<f64>,
    pub best_epoch: usize,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn without_wall_time(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

pub struct FitOutcome {
    pub last: Model<f32>,
    pub best: Model<f32>,
    pub report: RunReport,
    pub steps: Vec<StepLog>,
}

/// One CSV row per step.
pub fn loss_csv(steps: &[StepLog]) -> String {
    let mut s = String::from("step,intra,dasp,sadp,total,lr\n");
    for l in steps {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            l.step, l.loss.intra, l.loss.dasp, l.loss.sadp, l.loss.total, l.lr
        )
        .unwrap();
    }
    s
}

/// Gradients and loss of one SkeletonX step on `x` (the original batch
/// stacked over its DASP and SADP partner batches, `3B` rows).
pub fn skeletonx_step<S: Scalar>(
    model: &Model<S>,
    x: &Array4<S>,
    labels: &[usize],
    dasp_labels: &[usize],
    w_x: f64,
) -> (crate::params::Outcome<S>, LossBreakdown) {
    let b = labels.len();
    assert_eq!(x.dim().0, 3 * b, "original, DASP and SADP batches stacked");
    let head = model.head().expect("SkeletonX head");
    let k = model.class_count();
    let mut sess = Session::new(model.store(), Mode::Train);
    let xin = sess.input(x.clone().into_dyn());
    let fe = model.encode(&mut sess, xin);
    let d = head.disentangle(&mut sess, fe);
    let part = |sess: &mut Session<'_, S>, i: usize| Disentangled {
        spatial: sess.tape.slice_rows(d.spatial, i * b, (i + 1) * b),
        temporal: sess.tape.slice_rows(d.temporal, i * b, (i + 1) * b),
    };
    let (o, da, sa) = (part(&mut sess, 0), part(&mut sess, 1), part(&mut sess, 2));
    let classify = |sess: &mut Session<'_, S>, sp: &Disentangled, tp: &Disentangled| {
        let v = head.aggregate(sess, sp, tp, Mask::None);
        model.logits(sess, v)
    };
    let intra_all = classify(&mut sess, &d, &d);
    let logits = StepLogits {
        intra: sess.tape.slice_rows(intra_all, 0, b),
        intra_dasp: sess.tape.slice_rows(intra_all, b, 2 * b),
        intra_sadp: sess.tape.slice_rows(intra_all, 2 * b, 3 * b),
        dasp_cross: classify(&mut sess, &da, &o),
        dasp_cross_rev: classify(&mut sess, &o, &da),
        sadp_cross: classify(&mut sess, &sa, &o),
        sadp_cross_rev: classify(&mut sess, &o, &sa),
    };
    let (loss, breakdown) = composite_loss(&mut sess, &logits, &one_hot(labels, k), &one_hot(dasp_labels, k), w_x);
    (sess.finish(loss), breakdown)
}

/// Gradients and loss of one plain cross-entropy step against soft targets.
pub fn baseline_step<S: Scalar>(
    model: &Model<S>,
    x: &Array4<S>,
    targets: &Array2<S>,
) -> (crate::params::Outcome<S>, LossBreakdown) {
    let mut sess = Session::new(model.store(), Mode::Train);
    let xin = sess.input(x.clone().into_dyn());
    let f = model.feature(&mut sess, xin, Mask::None);
    let z = model.logits(&mut sess, f);
    let loss = sess.tape.softmax_cross_entropy(z, targets.clone());
    let ce = sess.tape.scalar(loss).f64();
    let breakdown = LossBreakdown {
        intra: ce,
        dasp: 0.0,
        sadp: 0.0,
        total: ce,
        w_x: 0.0,
    };
    (sess.finish(loss), breakdown)
}

/// Trains a fresh model on `train`. `pairs` is required in SkeletonX mode;
/// `eval` drives best-epoch selection and the reported accuracies.
pub fn fit(
    train: &TensorSet,
    pairs: Option<&PairIndex>,
    config: &TrainConfig,
    layout: &SkeletonLayout,
    eval: Option<&TensorSet>,
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let start = Instant::now();
    let k = train.manifest.class_count;
    let model_cfg = config.model_config(k, layout.clone());
    let mut model = Model::<f32>::new(model_cfg, config.seed)?;
    model.check_batch(&train.gather(&[0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7EA1);
    let bs = config.effective_batch_size();
    let n = train.len();
    let steps_per_epoch = n.div_ceil(bs);
    let pair_rows = match (config.mode, pairs) {
        (TrainMode::Skeletonx, None) => return Err(Error::Invalid("SkeletonX mode needs a pair index".into())),
        (TrainMode::Skeletonx, Some(p)) => Some(pair_positions(train, p)?),
        _ => None,
    };
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut last_eval = None;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(bs) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (outcome, loss) = match config.mode {
                TrainMode::Skeletonx => {
                    let (p, rows) = (pairs.unwrap(), pair_rows.as_ref().unwrap());
                    let positions: Vec<usize> = chunk.iter().map(|&i| rows.to_pair[i]).collect();
                    let (dp, sp) = p.draw_positions(&positions, &mut rng);
                    let dasp: Vec<usize> = dp.iter().map(|&j| rows.to_data[j]).collect();
                    let sadp: Vec<usize> = sp.iter().map(|&j| rows.to_data[j]).collect();
                    let mut all = chunk.to_vec();
                    all.extend(&dasp);
                    all.extend(&sadp);
                    let x = train.gather::<f32>(&all);
                    let dl: Vec<usize> = dasp.iter().map(|&i| train.labels[i]).collect();
                    skeletonx_step(&model, &x, &labels, &dl, config.w_x)
                }
                TrainMode::BaselineGap => {
                    let x = train.gather::<f32>(chunk);
                    baseline_step(&model, &x, &one_hot(&labels, k))
                }
                TrainMode::BaselineRotation => {
                    let mut x = train.gather::<f32>(chunk);
                    augment_rotation(&mut x, config.rotation_theta, &mut rng);
                    baseline_step(&model, &x, &one_hot(&labels, k))
                }
                TrainMode::BaselineMixup => {
                    let x = train.gather::<f32>(chunk);
                    let t = one_hot::<f32>(&labels, k);
                    let mut perm: Vec<usize> = (0..chunk.len()).collect();
                    perm.shuffle(&mut rng);
                    let lambda = Beta::new(config.mixup_alpha, config.mixup_alpha)
                        .expect("alpha validated")
                        .sample(&mut rng);
                    let (xm, tm) = mixup(&x, &t, &x.select(Axis(0), &perm), &t.select(Axis(0), &perm), lambda);
                    baseline_step(&model, &xm, &tm)
                }
            };
            let step = steps.len();
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: "training loss".into(),
                });
            }
            opt.step(model.store_mut(), &outcome.grads, lr);
            outcome.apply_running_stats(model.store_mut());
            for (s, v) in sums.iter_mut().zip([loss.intra, loss.dasp, loss.sadp, loss.total]) {
                *s += v;
            }
            steps.push(StepLog { step, epoch, lr, loss });
        }
        let m = steps_per_epoch as f64;
        let eval_now = eval.is_some()
            && (epoch == config.epochs || (config.eval_every > 0 && epoch % config.eval_every == 0));
        let eval_top1 = match (eval_now, eval) {
            (true, Some(e)) => Some(evaluate_top1(&model, e, Mask::None)?),
            _ => None,
        };
        if let Some(acc) = eval_top1 {
            last_eval = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.clone()));
            }
        }
        epochs.push(EpochSummary {
            epoch,
            lr,
            loss: LossBreakdown {
                intra: sums[0] / m,
                dasp: sums[1] / m,
                sadp: sums[2] / m,
                total: sums[3] / m,
                w_x: steps.last().map(|s: &StepLog| s.loss.w_x).unwrap_or(0.0),
            },
            eval_top1,
        });
    }
    let (best_top1, best_epoch, best_model) = match best {
        Some((a, e, m)) => (Some(a), e, m),
        None => (None, config.epochs, model.clone()),
    };
    let report = RunReport {
        mode: config.mode,
        seed: config.seed,
        batch_size: bs,
        steps_per_epoch,
        config_hash: config.hash(),
        model_hash: model.config().hash(),
        train_samples: n,
        epochs,
        final_top1: last_eval,
        best_top1,
        best_epoch,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(FitOutcome {
        last: model,
        best: best_model,
        report,
        steps,
    })
}

struct PairRows {
    to_pair: Vec<usize>,
    to_data: Vec<usize>,
}

fn pair_positions(train: &TensorSet, pairs: &PairIndex) -> Result<PairRows> {
    let to_pair = train
        .manifest
        .records
        .iter()
        .map(|r| {
            pairs
                .position(&r.sample_id)
                .ok_or_else(|| Error::Invalid(format!("{} missing from pair index", r.sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut to_data = vec![usize::MAX; pairs.len()];
    for (d, &p) in to_pair.iter().enumerate() {
        to_data[p] = d;
    }
    if to_data.contains(&usize::MAX) {
        return Err(Error::Invalid("pair index lists samples outside the training set".into()));
    }
    Ok(PairRows { to_pair, to_data })
}

/// Predicted class per sample in evaluation mode, in chunks of 64.
pub fn predict_all<S: Scalar>(model: &Model<S>, set: &TensorSet, mask: Mask) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::with_capacity(set.len());
    for chunk in idx.chunks(64) {
        out.extend(model.predict(&set.gather::<S>(chunk), mask)?);
    }
    Ok(out)
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate_top1<S: Scalar>(model: &Model<S>, set: &TensorSet, mask: Mask) -> Result<f64> {
    let pred = predict_all(model, set, mask)?;
    Ok(top1(&pred, &set.labels))
}

pub fn top1(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}
