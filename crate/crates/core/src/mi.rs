//! Neural mutual-information estimation.
//!
//! A statistics network `T(x, y)` is trained to maximise the
//! Donsker–Varadhan lower bound
//!
//! ```text
//! I(X; Y) ≥ E_joint[T] − ln E_marginal[e^T]
//! ```
//!
//! with marginal pairs made by shuffling `y` within each batch. The gradient
//! of the log term is taken against an exponential moving average of the
//! denominator, which removes the bias of its minibatch estimate.
//!
//! The estimates probe an information-bottleneck reading of the aggregation
//! head. Training seeks a representation `V` that keeps `I(V; Y)` high while
//! compressing the input, `max I(V; Y) − β·I(V; X)`. With `V = A(F, F′)`
//! built from two encoded samples, the data-processing inequality gives
//! `I(V; Y) ≤ I(F, F′; Y)`, so aggregating a second sample can raise the
//! ceiling above the single-sample `I(F; Y)`. Discrete labels also bound
//! every estimate by `H(Y) ≤ ln K`. Only the first term is estimated here;
//! `β`, the compression term and a variational decoder `q(Y | V)` have no
//! runtime counterpart.

use std::fmt::Write as _;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::head::Mask;
use crate::model::Model;
use crate::objective::one_hot;
use crate::optim::Adam;
use crate::params::{Dense, Mode, ParamStore, Session};
use crate::sampler::build_pair_index;
use crate::scalar::Scalar;
use crate::train::TensorSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        Self {
            steps: 4500,
            batch: 64,
            hidden: 256,
            depth: 2,
            lr: 1e-4,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch < 2 || self.hidden == 0 || self.depth == 0 {
            return Err(Error::Config("steps, hidden and depth must be positive and batch at least 2".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiCurve {
    /// Per-step minibatch bound, nats.
    pub estimates: Vec<f64>,
}

impl MiCurve {
    /// Mean of the final 10% of steps (at least one).
    pub fn converged(&self) -> f64 {
        let n = self.estimates.len();
        let tail = (n / 10).max(1).min(n);
        self.estimates[n - tail..].iter().sum::<f64>() / tail as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,estimate\n");
        for (i, e) in self.estimates.iter().enumerate() {
            writeln!(s, "{i},{e}").unwrap();
        }
        s
    }
}

/// Estimates `I(X; Y)` between rows of `features` and discrete `labels`,
/// embedded one-hot.
pub fn estimate_mi<S: Scalar>(features: &Array2<S>, labels: &[usize], classes: usize, config: &MineConfig) -> Result<MiCurve> {
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("label {y} out of range for {classes} classes")));
    }
    estimate_pairs(features, &one_hot::<S>(labels, classes), config)
}

/// Estimates `I(X; Y)` between paired rows of two continuous matrices.
pub fn estimate_mi_continuous<S: Scalar>(x: &Array2<S>, y: &Array2<S>, config: &MineConfig) -> Result<MiCurve> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("{} x rows for {} y rows", x.nrows(), y.nrows())));
    }
    estimate_pairs(x, y, config)
}

fn estimate_pairs<S: Scalar>(x: &Array2<S>, y: &Array2<S>, config: &MineConfig) -> Result<MiCurve> {
    config.validate()?;
    let n = x.nrows();
    if n < config.batch {
        return Err(Error::Invalid(format!("{n} samples for batch {}", config.batch)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<S>::new();
    let mut layers = Vec::new();
    let mut width = x.ncols() + y.ncols();
    for i in 0..config.depth {
        layers.push(Dense::new(&mut store, &format!("mine.hidden{i}"), width, config.hidden, true, &mut rng));
        width = config.hidden;
    }
    let out = Dense::new(&mut store, "mine.out", width, 1, true, &mut rng);
    let mut opt = Adam::new(config.lr);
    let b = config.batch;
    let mut ema: Option<f64> = None;
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut estimates = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor + b > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + b];
        cursor += b;
        let mut shuffled = rows.to_vec();
        shuffled.shuffle(&mut rng);
        let xb = x.select(Axis(0), rows);
        let joint = ndarray::concatenate(Axis(1), &[xb.view(), y.select(Axis(0), rows).view()]).unwrap();
        let marg = ndarray::concatenate(Axis(1), &[xb.view(), y.select(Axis(0), &shuffled).view()]).unwrap();
        let input = ndarray::concatenate(Axis(0), &[joint.view(), marg.view()]).unwrap();

        let mut sess = Session::new(&store, Mode::Train);
        let mut h = sess.input(input.into_dyn());
        for l in &layers {
            h = l.forward(&mut sess, h);
            h = sess.tape.relu(h);
        }
        let t = out.forward(&mut sess, h);
        let tv: Array1<S> = sess.tape.value(t).slice(s![.., 0]).to_owned().into_dimensionality().unwrap();
        let tj = tv.slice(s![..b]);
        let tm = tv.slice(s![b..]);
        let mean_j = tj.iter().map(|v| v.f64()).sum::<f64>() / b as f64;
        let mmax = tm.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let mean_exp_scaled = tm.iter().map(|v| (v.f64() - mmax).exp()).sum::<f64>() / b as f64;
        let bound = mean_j - (mmax + mean_exp_scaled.ln());
        if !bound.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "mutual-information bound".into(),
            });
        }
        estimates.push(bound);
        let mean_exp = mean_exp_scaled * mmax.exp();
        let avg = match ema {
            None => mean_exp,
            Some(e) => config.ema_decay * e + (1.0 - config.ema_decay) * mean_exp,
        };
        ema = Some(avg);

        // surrogate: −(mean T_joint − mean e^{T_marginal} / ema)
        let tj_var = sess.tape.slice_rows(t, 0, b);
        let tm_var = sess.tape.slice_rows(t, b, 2 * b);
        let mj = sess.tape.mean_all(tj_var);
        let e = sess.tape.exp(tm_var);
        let me = sess.tape.mean_all(e);
        let me = sess.tape.scale(me, S::of(1.0 / avg.max(1e-30)));
        let loss = sess.tape.sub(me, mj);
        let outcome = sess.finish(loss);
        opt.step(&mut store, &outcome.grads);
    }
    Ok(MiCurve { estimates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiComparison {
    /// Pooled encoder feature of the baseline model.
    pub pooled: MiCurve,
    /// Aggregated feature of the SkeletonX model.
    pub aggregated: MiCurve,
}

impl MiComparison {
    pub fn converged(&self) -> (f64, f64) {
        (self.pooled.converged(), self.aggregated.converged())
    }
}

/// How the aggregated feature of each evaluation sample is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Both halves from the sample itself.
    Intra,
    /// Spatial half from a same-action partner of another performer,
    /// temporal half from the sample.
    #[default]
    Sadp,
}

/// Feature matrices `(F, V)` for [`compare_mi`], one row per sample of
/// `set`. `F` is the pooled encoding of `baseline` when given and of
/// `model` otherwise; `V` is the aggregated feature of `model`.
pub fn comparison_features<S: Scalar>(
    baseline: Option<&Model<S>>,
    model: &Model<S>,
    set: &TensorSet,
    pairing: Pairing,
    seed: u64,
) -> Result<(Array2<S>, Array2<S>)> {
    if model.head().is_none() {
        return Err(Error::Invalid("the aggregated feature needs a SkeletonX head".into()));
    }
    let rows: Vec<usize> = (0..set.len()).collect();
    let partner: Vec<usize> = match pairing {
        Pairing::Intra => rows.clone(),
        Pairing::Sadp => {
            let pairs = build_pair_index(&set.manifest, seed);
            rows.iter().map(|&i| pairs.sadp_of(i)[0]).collect()
        }
    };
    let encoder = baseline.unwrap_or(model);
    let mut f = Array2::zeros((set.len(), encoder.encoder().out_channels()));
    let mut v = Array2::zeros((set.len(), model.feature_width()));
    for (c, chunk) in rows.chunks(64).enumerate() {
        let at = s![c * 64..c * 64 + chunk.len(), ..];
        let x = set.gather::<S>(chunk);
        f.slice_mut(at).assign(&encoder.pooled_encoding(&x)?);
        let from: Vec<usize> = chunk.iter().map(|&i| partner[i]).collect();
        v.slice_mut(at).assign(&model.pair_features(&set.gather::<S>(&from), &x, Mask::None)?);
    }
    Ok((f, v))
}

/// Both estimates under one config and seed.
pub fn compare_mi<S: Scalar>(
    pooled: &Array2<S>,
    aggregated: &Array2<S>,
    labels: &[usize],
    classes: usize,
    config: &MineConfig,
) -> Result<MiComparison> {
    Ok(MiComparison {
        pooled: estimate_mi(pooled, labels, classes, config)?,
        aggregated: estimate_mi(aggregated, labels, classes, config)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converged_is_tail_mean() {
        let c = MiCurve {
            estimates: (0..20).map(|i| i as f64).collect(),
        };
        assert_eq!(c.converged(), 18.5);
        let one = MiCurve { estimates: vec![0.3] };
        assert_eq!(one.converged(), 0.3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = Array2::<f64>::zeros((10, 2));
        let cfg = MineConfig {
            steps: 1,
            batch: 4,
            hidden: 4,
            ..MineConfig::default()
        };
        assert!(estimate_mi(&f, &[0; 9], 2, &cfg).is_err());
        assert!(estimate_mi(&f, &[2; 10], 2, &cfg).is_err());
        assert!(estimate_mi(&f, &[0; 10], 2, &MineConfig { batch: 20, ..cfg.clone() }).is_err());
        assert!(estimate_mi(&f, &[0; 10], 2, &MineConfig { ema_decay: 1.0, ..cfg.clone() }).is_err());
        assert!(estimate_mi(&f, &[0; 10], 2, &cfg).is_ok());
    }

    #[test]
    fn deterministic_given_seed() {
        let f = Array2::from_shape_fn((32, 3), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let y: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let cfg = MineConfig {
            steps: 20,
            batch: 8,
            hidden: 8,
            ..MineConfig::default()
        };
        assert_eq!(estimate_mi(&f, &y, 2, &cfg).unwrap(), estimate_mi(&f, &y, 2, &cfg).unwrap());
    }
}
