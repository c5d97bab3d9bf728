//! Adam with L2 regularization, gradient clipping and schedule helpers.

use crate::autodiff::{ParamStore, Tensor};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the `wd * theta` term added to every gradient.
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with gradients aligned to the store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((theta, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((th, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + self.weight_decay * *th;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *th -= self.lr * update;
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Multiplies the learning rate by `factor` after `patience` epochs without improvement.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement needed to reset the counter.
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            threshold: 1e-4,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one validation loss and returns the learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = if self.best.is_finite() {
            metric < self.best - self.threshold * self.best.abs()
        } else {
            metric < self.best
        };
        if improved {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            waited: 0,
        }
    }

    /// Returns true when `metric` is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.waited = 0;
            true
        } else {
            self.waited += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.waited >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}
