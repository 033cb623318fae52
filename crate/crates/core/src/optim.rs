//! AdamW with decoupled weight decay, global-norm clipping, and an
//! exponential moving average of parameters.

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub hp: AdamHyper,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(hp: AdamHyper, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW { hp, m, v, t: 0 }
    }

    /// One update over the store. `grads[i]` of `None` leaves parameter `i`
    /// untouched (it was not part of the step's graph).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let b1c = 1.0 - self.hp.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.hp.beta2.powi(self.t as i32);
        for (i, tensor) in store.tensors_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.hp.beta1 * m[j] + (1.0 - self.hp.beta1) * g[j];
                v[j] = self.hp.beta2 * v[j] + (1.0 - self.hp.beta2) * g[j] * g[j];
                let mhat = m[j] / b1c;
                let vhat = v[j] / b2c;
                let p = &mut tensor.data[j];
                *p -= self.hp.lr * (mhat / (vhat.sqrt() + self.hp.eps) + self.hp.weight_decay * *p);
            }
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Shadow copy of parameters: `ema <- decay * ema + (1 - decay) * params`.
#[derive(Debug, Clone)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Vec<f64>>,
}

impl Ema {
    pub fn new(decay: f64, store: &ParamStore) -> Self {
        Ema { decay, shadow: store.iter().map(|(_, t)| t.data.clone()).collect() }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (s, (_, t)) in self.shadow.iter_mut().zip(store.iter()) {
            for (sv, &pv) in s.iter_mut().zip(&t.data) {
                *sv = self.decay * *sv + (1.0 - self.decay) * pv;
            }
        }
    }

    /// Copy the averaged weights into a clone of `store`.
    pub fn materialize(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (id, s) in out.ids().zip(&self.shadow).map(|(i, s)| (i, s.clone())) {
            out.set_data(id, s);
        }
        out
    }
}
