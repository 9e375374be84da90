//! SGD with momentum, decoupled-from-norm weight decay and cosine annealing.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr0: 0.1, momentum: 0.9, weight_decay: 1e-4, epochs: 15, batch_size: 32, seed: 0, flip: false }
    }
}

/// `lr0 · ½ · (1 + cos(π·t/T))`.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v ← μ·v + g + wd·p; p ← p − lr·v`. Normalisation parameters get no
    /// weight decay. Parameters without a gradient are left alone. A
    /// non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, g) in grads.params() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            let decay = if store.param(id).kind.decays() { self.weight_decay } else { 0.0 };
            let p = store.get_mut(id);
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi + decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}
