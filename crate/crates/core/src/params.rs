//! Named parameter storage and the per-forward-pass session that binds
//! parameters onto a [`Tape`].

use std::collections::HashMap;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;

use crate::scalar::Scalar;
use crate::tape::{BatchStats, Grads, NormMode, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics and other state not touched by the optimiser.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: ArrayD<S>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn trainable(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        self.add(name, value, ParamKind::Trainable)
    }

    pub fn buffer(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        self.add(name, value, ParamKind::Buffer)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn vector(&self, id: ParamId) -> Array1<S> {
        let v = self.value(id);
        Array1::from_iter(v.iter().copied())
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_trainable(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Converts every value to another scalar type, keeping names and order.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.mapv(|x| T::of(x.f64())),
                    kind: e.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct PendingStats<S> {
    mean: ParamId,
    var: ParamId,
    momentum: S,
    stats: BatchStats<S>,
}

/// One forward pass: a fresh tape plus the parameters bound onto it.
pub struct Session<'a, S: Scalar> {
    pub tape: Tape<S>,
    store: &'a ParamStore<S>,
    bound: HashMap<ParamId, Var>,
    pending: Vec<PendingStats<S>>,
    pub mode: Mode,
}

/// Everything a finished session hands back to the trainer.
pub struct Outcome<S> {
    pub grads: Vec<(ParamId, ArrayD<S>)>,
    stats: Vec<PendingStats<S>>,
}

impl<S: Scalar> Outcome<S> {
    /// Folds the batch statistics gathered during the pass into the running
    /// buffers, in the order the normalisations ran.
    pub fn apply_running_stats(&self, store: &mut ParamStore<S>) {
        apply_stats(&self.stats, store);
    }
}

fn apply_stats<S: Scalar>(stats: &[PendingStats<S>], store: &mut ParamStore<S>) {
    for p in stats {
        let m = p.momentum;
        let keep = S::one() - m;
        let n = p.stats.count;
        let unbias = if n > 1 {
            S::of(n as f64 / (n - 1) as f64)
        } else {
            S::one()
        };
        let mean = store.value_mut(p.mean);
        for (r, &b) in mean.iter_mut().zip(p.stats.mean.iter()) {
            *r = keep * *r + m * b;
        }
        let var = store.value_mut(p.var);
        for (r, &b) in var.iter_mut().zip(p.stats.var.iter()) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a ParamStore<S>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            pending: Vec::new(),
            mode,
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    /// The tape variable holding a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let v = self.tape.leaf(self.store.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn input(&mut self, value: ArrayD<S>) -> Var {
        self.tape.constant(value)
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(p, v)| (*p, *v))
    }

    pub fn record_stats(&mut self, norm: &BatchNorm, stats: BatchStats<S>) {
        self.pending.push(PendingStats {
            mean: norm.running_mean,
            var: norm.running_var,
            momentum: S::of(norm.momentum),
            stats,
        });
    }

    /// Backpropagates from `loss` and collects per-parameter gradients.
    pub fn finish(self, loss: Var) -> Outcome<S> {
        let mut grads: Grads<S> = self.tape.backward(loss);
        let mut out: Vec<(ParamId, ArrayD<S>)> = self
            .bound
            .iter()
            .filter(|(p, _)| self.store.entry(**p).kind == ParamKind::Trainable)
            .map(|(p, v)| {
                let g = grads
                    .take(*v)
                    .unwrap_or_else(|| ArrayD::zeros(self.store.value(*p).raw_dim()));
                (*p, g)
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        Outcome {
            grads: out,
            stats: self.pending,
        }
    }

    /// Ends a pass without gradients, returning only the gathered statistics.
    pub fn finish_forward(self) -> Outcome<S> {
        Outcome {
            grads: Vec::new(),
            stats: self.pending,
        }
    }
}

/// Batch normalisation over the channel (last) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize, affine: bool) -> Self {
        let (gamma, beta) = if affine {
            (
                Some(store.trainable(format!("{name}.weight"), ArrayD::ones(IxDyn(&[channels])))),
                Some(store.trainable(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[channels])))),
            )
        } else {
            (None, None)
        };
        Self {
            gamma,
            beta,
            running_mean: store.buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: store.buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Var {
        let gamma = self.gamma.map(|g| sess.param(g));
        let beta = self.beta.map(|b| sess.param(b));
        let eps = S::of(self.eps);
        match sess.mode {
            Mode::Train => {
                let (y, stats) = sess.tape.batch_norm(x, gamma, beta, NormMode::Train { eps });
                sess.record_stats(self, stats.expect("training mode yields statistics"));
                y
            }
            Mode::Eval => {
                let store = sess.store();
                let mean = store.vector(self.running_mean);
                let var = store.vector(self.running_var);
                let (y, _) = sess.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    NormMode::Eval {
                        mean: &mean,
                        var: &var,
                        eps,
                    },
                );
                y
            }
        }
    }
}

/// Dense map `x · W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Uniform initialisation in `±1/√inputs`, zero bias.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let weight = store.trainable(format!("{name}.weight"), uniform(rng, &[inputs, outputs], bound));
        let bias = bias.then(|| store.trainable(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[outputs]))));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Var {
        let w = sess.param(self.weight);
        let b = self.bias.map(|b| sess.param(b));
        sess.tape.linear(x, w, b)
    }
}

pub fn uniform<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<S> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || S::of(rng.random_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut store, "bn", 1, false);
        let x = ndarray::arr2(&[[1.0], [3.0]]).into_dyn();
        let mut sess = Session::new(&store, Mode::Train);
        let xv = sess.input(x);
        let y = bn.forward(&mut sess, xv);
        let m = sess.tape.mean_all(y);
        let out = sess.finish(m);
        out.apply_running_stats(&mut store);
        assert!((store.value(bn.running_mean)[[0]] - 0.2).abs() < 1e-12);
        // unbiased batch variance is 2
        assert!((store.value(bn.running_var)[[0]] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn shared_parameters_accumulate_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dense = Dense::new(&mut store, "d", 2, 1, true, &mut rng);
        let mut sess = Session::new(&store, Mode::Train);
        let a = sess.input(ndarray::arr2(&[[1.0, 0.0]]).into_dyn());
        let b = sess.input(ndarray::arr2(&[[0.0, 2.0]]).into_dyn());
        let ya = dense.forward(&mut sess, a);
        let yb = dense.forward(&mut sess, b);
        let s = sess.tape.add(ya, yb);
        let l = sess.tape.mean_all(s);
        let out = sess.finish(l);
        let gw = &out.grads.iter().find(|(p, _)| *p == dense.weight).unwrap().1;
        assert_eq!(gw.as_slice().unwrap(), &[1.0, 2.0]);
        let gb = &out.grads.iter().find(|(p, _)| Some(*p) == dense.bias).unwrap().1;
        assert_eq!(gb.as_slice().unwrap(), &[2.0]);
    }

    #[test]
    fn counts_by_prefix() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Dense::new(&mut store, "classifier", 4, 3, true, &mut rng);
        BatchNorm::new(&mut store, "encoder.bn", 5, true);
        assert_eq!(store.count_trainable("classifier"), 4 * 3 + 3);
        assert_eq!(store.count_trainable("encoder"), 10);
        assert_eq!(store.count_trainable("head"), 0);
    }
}
