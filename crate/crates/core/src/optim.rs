//! First-order optimizers over a [`ParamStore`].

use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// SGD with heavy-ball momentum. Weight decay is added to the gradient
/// before the momentum update: `v ← μv + (g + λθ)`, `θ ← θ − η v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamId, ArrayD<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, ArrayD<S>)], lr: f64) {
        let (mu, wd, lr) = (S::of(self.momentum), S::of(self.weight_decay), S::of(lr));
        for (id, g) in grads {
            let theta = store.value_mut(*id);
            let v = self
                .velocity
                .entry(*id)
                .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
            Zip::from(&mut *v).and(&*theta).and(g).for_each(|v, &p, &g| {
                *v = mu * *v + g + wd * p;
            });
            Zip::from(theta).and(&*v).for_each(|p, &v| *p -= lr * v);
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: HashMap<ParamId, (ArrayD<S>, ArrayD<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, ArrayD<S>)]) {
        self.t += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::one() - b1.powi(self.t);
        let c2 = S::one() - b2.powi(self.t);
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for (id, g) in grads {
            let theta = store.value_mut(*id);
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (ArrayD::zeros(theta.raw_dim()), ArrayD::zeros(theta.raw_dim())));
            Zip::from(theta).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}
