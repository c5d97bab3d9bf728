//! The dual-path detector: short-term graph path, long-term temporal path and
//! their attention fusion.

mod config;
pub mod fusion;
pub mod lsgm;
pub mod sarm;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{Ablations, IsolatedNodes, KlForm, ModelConfig, ScaleFusion};
pub use fusion::{Attended, Fusion};
pub use lsgm::{AffinityGraph, Lsgm};
pub use sarm::{Sampling, Sarm, SparseGraphSet};

use crate::autodiff::{checkpoint, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{Standardization, TrainingSample};
use crate::error::{DartsError, Result};
use crate::training::loss::{gaussian_nll, kl_loss, LossVars};

/// Stacked samples, channel-major per sample.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, N, w]`
    pub window: Tensor,
    /// `[B, N, h]`
    pub history: Tensor,
    /// `[B, N, w]`
    pub target: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[TrainingSample<'_>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| DartsError::contract("empty batch"))?;
        let n = first.dataset.n_channels();
        let (w, h) = (first.layout.window, first.layout.history);
        let b = samples.len();
        let (mut win, mut hist, mut tgt) = (
            Vec::with_capacity(b * n * w),
            Vec::with_capacity(b * n * h),
            Vec::with_capacity(b * n * w),
        );
        for s in samples {
            win.extend(s.window());
            hist.extend(s.history());
            tgt.extend(s.target());
        }
        Ok(Self {
            window: Tensor::new(vec![b, n, w], win)?,
            history: Tensor::new(vec![b, n, h], hist)?,
            target: Tensor::new(vec![b, n, w], tgt)?,
        })
    }

    pub fn len(&self) -> usize {
        self.window.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything a forward pass leaves on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, N, w]` predicted next window.
    pub prediction: Var,
    pub graphs: SparseGraphSet,
    pub affinity: Option<AffinityGraph>,
    /// `[B, N, w, T]`
    pub attention: Option<Var>,
    /// `[B, w, N, d]`
    pub short_term: Var,
    /// `[B, T, N, d]`
    pub long_term: Option<Var>,
}

/// Robust per-channel calibration of raw scores, fitted on validation errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub standardization: Option<Standardization>,
    pub calibration: Option<Calibration>,
    pub channel_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct StoredMeta {
    model: ModelConfig,
    n_channels: usize,
    #[serde(flatten)]
    extra: ModelMetadata,
}

#[derive(Clone, Debug)]
pub struct Darts {
    config: ModelConfig,
    n_channels: usize,
    params: ParamStore,
    sarm: Sarm,
    lsgm: Lsgm,
    fusion: Fusion,
    log_sigma_sq: ParamId,
    pub metadata: ModelMetadata,
}

impl Darts {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, n_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if n_channels < 2 {
            return Err(DartsError::config("the channel graph needs at least 2 channels"));
        }
        let mut params = ParamStore::new();
        let sarm = Sarm::new(&mut params, &config, n_channels, rng);
        let lsgm = Lsgm::new(&mut params, &config, n_channels, rng);
        let fusion = Fusion::new(&mut params, &config, rng);
        let log_sigma_sq = params.add("loss.log_sigma_sq", Tensor::zeros(&[1]));
        Ok(Self {
            config,
            n_channels,
            params,
            sarm,
            lsgm,
            fusion,
            log_sigma_sq,
            metadata: ModelMetadata::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sarm(&self) -> &Sarm {
        &self.sarm
    }

    pub fn lsgm(&self) -> &Lsgm {
        &self.lsgm
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn sigma_sq(&self) -> f64 {
        self.params.get(self.log_sigma_sq).data()[0].exp()
    }

    pub fn log_sigma_sq(&self) -> ParamId {
        self.log_sigma_sq
    }

    /// Builds the forward graph for `batch` on `tape`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch, sampling: &Sampling) -> Result<Forward> {
        let s = batch.window.shape();
        if s[1] != self.n_channels || s[2] != self.config.window {
            return Err(DartsError::shape(format!(
                "batch window {s:?}, model expects [B, {}, {}]",
                self.n_channels, self.config.window
            )));
        }
        let x = tape.constant(batch.window.clone());
        let enc = self.sarm.encode(tape, p, x)?;
        let graphs = self.sarm.learn_graphs(tape, p, enc, sampling)?;
        let short_term = self.sarm.diffuse_raw(tape, p, x, &graphs)?;

        let (long_term, affinity) = if self.config.ablations.disable_lsgm {
            (None, None)
        } else {
            let hist = tape.constant(batch.history.clone());
            let (h2, a) = self.lsgm.forward(tape, p, hist)?;
            (Some(h2), Some(a))
        };
        let (t1, t2) = self.fusion.align(tape, p, short_term, long_term.unwrap_or(short_term))?;
        let attended = if self.config.ablations.disable_fusion_attention {
            self.fusion.mean_context(tape, p, t1, t2)?
        } else {
            self.fusion.cross_attend(tape, p, t1, t2)?
        };
        let prediction = self.fusion.predict(tape, p, attended.z)?;
        Ok(Forward {
            prediction,
            graphs,
            affinity,
            attention: attended.weights,
            short_term,
            long_term,
        })
    }

    /// Structure and likelihood terms for a forward pass against `target`.
    pub fn loss(&self, tape: &mut Tape, p: &Bound, fwd: &Forward, target: &Tensor) -> Result<LossVars> {
        let mask = self.sarm.mask().clone();
        let kl = kl_loss(tape, fwd.graphs.probs, &mask, &self.config.priors, self.config.ablations.kl_form)?;
        let y = tape.constant(target.clone());
        let nll = gaussian_nll(tape, fwd.prediction, y, p.get(self.log_sigma_sq))?;
        let total = tape.add(kl, nll)?;
        Ok(LossVars { kl, nll, total })
    }

    /// Deterministic predictions `[B, N, w]`, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, samples: &[TrainingSample<'_>], chunk: usize) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(samples.len());
        for part in samples.chunks(chunk.max(1)) {
            let batch = Batch::from_samples(part)?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, false);
            let fwd = self.forward(&mut tape, &p, &batch, &Sampling::Argmax)?;
            let pred = tape.value(fwd.prediction);
            let per = pred.numel() / part.len();
            for i in 0..part.len() {
                out.push(Tensor::new(
                    vec![self.n_channels, self.config.window],
                    pred.data()[i * per..(i + 1) * per].to_vec(),
                )?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = StoredMeta {
            model: self.config.clone(),
            n_channels: self.n_channels,
            extra: self.metadata.clone(),
        };
        let value = serde_json::to_value(&meta).map_err(|e| DartsError::contract(e.to_string()))?;
        checkpoint::save(path, &self.params, &value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (store, value) = checkpoint::load(path)?;
        let meta: StoredMeta = serde_json::from_value(value)
            .map_err(|e| DartsError::Compatibility(format!("{}: bad metadata: {e}", path.display())))?;
        // parameter layout is fully determined by config and channel count
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Self::new(meta.model, meta.n_channels, &mut rng)?;
        model.params.load_from(&store)?;
        model.metadata = meta.extra;
        Ok(model)
    }
}
