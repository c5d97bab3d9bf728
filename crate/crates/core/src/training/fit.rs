//! Mini-batch training with plateau decay, early stopping and best-checkpoint
//! selection on a held-out tail of the training samples.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossTerms;
use super::optim::{clip_global_norm, Adam, EarlyStopping, ReduceOnPlateau};
use crate::autodiff::{Tape, Tensor};
use crate::data::TrainingSample;
use crate::error::{DartsError, Result};
use crate::model::{Batch, Darts, Sampling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples per forward pass; gradients are accumulated up to `batch_size`.
    pub micro_batch: usize,
    pub grad_clip: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    /// Tail fraction of the samples used for validation.
    pub validation_fraction: f64,
    /// Cap on optimizer steps per epoch; the shuffled order decides which batches run.
    pub max_batches_per_epoch: Option<usize>,
    /// Evenly spaced subset of the validation samples.
    pub max_validation_samples: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            micro_batch: 8,
            grad_clip: 1.0,
            lr: 1e-3,
            lr_decay: 0.8,
            plateau_patience: 5,
            min_lr: 1e-6,
            early_stop_patience: 20,
            weight_decay: 1e-4,
            validation_fraction: 0.1,
            max_batches_per_epoch: None,
            max_validation_samples: None,
            seeds: (0..6).collect(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("micro_batch", self.micro_batch),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DartsError::config(format!("{name} must be at least 1")));
            }
        }
        if self.max_batches_per_epoch == Some(0) || self.max_validation_samples == Some(0) {
            return Err(DartsError::config("batch and validation caps must be at least 1"));
        }
        let reals = [
            ("grad_clip", self.grad_clip),
            ("lr", self.lr),
            ("min_lr", self.min_lr),
        ];
        for (name, v) in reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DartsError::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(DartsError::Parameter(format!("lr_decay {} outside (0, 1)", self.lr_decay)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DartsError::Parameter("weight_decay must be nonnegative".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(DartsError::Parameter(format!(
                "validation_fraction {} outside (0, 1)",
                self.validation_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(DartsError::config("at least one seed is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_nll: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    /// Tab-separated history with a header line.
    pub fn write_history<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch\ttrain_loss\tval_loss\tval_nll\tlr")?;
        for r in &self.history {
            writeln!(
                out,
                "{}\t{:e}\t{:e}\t{:e}\t{:e}",
                r.epoch, r.train_loss, r.val_loss, r.val_nll, r.lr
            )?;
        }
        Ok(())
    }

    pub fn save_history(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| DartsError::io(path, e))?;
        self.write_history(std::io::BufWriter::new(file))
            .map_err(|e| DartsError::io(path, e))
    }
}

/// Splits off the last `fraction` of the samples (at least one) for validation.
pub fn split_validation<'a, 'b>(
    samples: &'b [TrainingSample<'a>],
    fraction: f64,
) -> Result<(&'b [TrainingSample<'a>], &'b [TrainingSample<'a>])> {
    if samples.len() < 2 {
        return Err(DartsError::contract(format!(
            "need at least 2 samples to hold out validation, got {}",
            samples.len()
        )));
    }
    let n_val = ((samples.len() as f64 * fraction).ceil() as usize).clamp(1, samples.len() - 1);
    Ok(samples.split_at(samples.len() - n_val))
}

fn spaced_subset<'a>(samples: &[TrainingSample<'a>], cap: Option<usize>) -> Vec<TrainingSample<'a>> {
    match cap {
        Some(k) if k < samples.len() => (0..k).map(|i| samples[i * samples.len() / k]).collect(),
        _ => samples.to_vec(),
    }
}

/// Mean loss terms over `samples` with deterministic graphs.
pub fn evaluate_loss(model: &Darts, samples: &[TrainingSample<'_>], chunk: usize) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    for part in samples.chunks(chunk.max(1)) {
        let batch = Batch::from_samples(part)?;
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, false);
        let fwd = model.forward(&mut tape, &p, &batch, &Sampling::Argmax)?;
        let lv = model.loss(&mut tape, &p, &fwd, &batch.target)?;
        let t = lv.values(&tape, model.sigma_sq());
        let wgt = part.len() as f64 / samples.len() as f64;
        acc.kl += wgt * t.kl;
        acc.nll += wgt * t.nll;
        acc.total += wgt * t.total;
    }
    acc.sigma_sq = model.sigma_sq();
    acc.check_finite()?;
    Ok(acc)
}

/// One optimizer step on `batch`; returns the batch-mean loss terms and the
/// gradient norm before clipping.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Darts,
    adam: &mut Adam,
    batch: &[TrainingSample<'_>],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(LossTerms, f64)> {
    let grads = accumulate_gradients(model, batch, config.micro_batch, rng)?;
    let (terms, mut grads) = grads;
    for (g, name) in grads.iter().zip(model.params().names()) {
        if !g.all_finite() {
            return Err(DartsError::NonFinite {
                term: format!("gradient of {name}"),
                detail: "after backward".into(),
            });
        }
    }
    let norm = clip_global_norm(&mut grads, config.grad_clip);
    adam.step(model.params_mut(), &grads);
    Ok((terms, norm))
}

/// Batch-mean loss and its gradient, accumulated over micro-batches with
/// training-mode graph sampling.
pub fn accumulate_gradients<R: Rng + ?Sized>(
    model: &Darts,
    batch: &[TrainingSample<'_>],
    micro: usize,
    rng: &mut R,
) -> Result<(LossTerms, Vec<Tensor>)> {
    let cfg = model.config();
    let mut total: Option<Vec<Tensor>> = None;
    let mut terms = LossTerms::default();
    for part in batch.chunks(micro.max(1)) {
        let frac = part.len() as f64 / batch.len() as f64;
        let b = Batch::from_samples(part)?;
        let sampling = Sampling::train(part.len(), cfg.heads, model.n_channels(), rng);
        let mut tape = Tape::new();
        let p = model.params().bind(&mut tape, true);
        let fwd = model.forward(&mut tape, &p, &b, &sampling)?;
        let lv = model.loss(&mut tape, &p, &fwd, &b.target)?;
        let t = lv.values(&tape, model.sigma_sq());
        t.check_finite()?;
        terms.kl += frac * t.kl;
        terms.nll += frac * t.nll;
        terms.total += frac * t.total;
        let scaled = tape.mul_scalar(lv.total, frac);
        let mut grads = tape.backward(scaled)?;
        let g = p.collect(&mut grads, model.params());
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&g) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    terms.sigma_sq = model.sigma_sq();
    let grads = total.ok_or_else(|| DartsError::contract("empty batch"))?;
    Ok((terms, grads))
}

/// Trains in place and leaves the best-validation parameters in `model`.
pub fn fit<R: Rng + ?Sized>(
    model: &mut Darts,
    samples: &[TrainingSample<'_>],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    fit_with(model, samples, config, rng, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with<R: Rng + ?Sized, F: FnMut(&EpochRecord)>(
    model: &mut Darts,
    samples: &[TrainingSample<'_>],
    config: &TrainConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<TrainReport> {
    config.validate()?;
    let (train, val) = split_validation(samples, config.validation_fraction)?;
    let val = spaced_subset(val, config.max_validation_samples);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(model.params(), config.lr, config.weight_decay);
    let mut plateau = ReduceOnPlateau::new(config.lr_decay, config.plateau_patience, config.min_lr);
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = model.params().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if let Some(cap) = config.max_batches_per_epoch {
            batches.truncate(cap);
        }
        let lr = adam.lr;
        let mut train_loss = 0.0;
        for idx in &batches {
            let batch: Vec<TrainingSample<'_>> = idx.iter().map(|&i| train[i]).collect();
            let (terms, _) = train_step(model, &mut adam, &batch, config, rng)?;
            train_loss += terms.total / batches.len() as f64;
        }
        let v = evaluate_loss(model, &val, config.micro_batch)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: v.total,
            val_nll: v.nll,
            lr,
        };
        on_epoch(&record);
        history.push(record);
        if stopper.observe(epoch, v.total) {
            best = model.params().clone();
        }
        adam.lr = plateau.observe(v.total, adam.lr);
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    model.params_mut().load_from(&best)?;
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}
