//! Prediction-error anomaly scores.

use crate::data::{samples_at, TimeSeriesDataset, TrainingSample};
use crate::error::{DartsError, Result};
use crate::model::{Calibration, Darts};

/// Smallest interquartile range used when standardizing a channel.
pub const IQR_FLOOR: f64 = 1e-3;

/// Per-timestep channel scores and their maximum, `L x N` row-major over the
/// whole series. Rows before `first_scored` are zero and not evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub n_channels: usize,
    pub first_scored: usize,
    pub channel: Vec<f64>,
    pub global: Vec<f64>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.channel[t * self.n_channels..(t + 1) * self.n_channels]
    }

    /// Global scores of the evaluated timesteps.
    pub fn scored_global(&self) -> &[f64] {
        &self.global[self.first_scored..]
    }

    /// Aggregates channel scores by their maximum.
    pub fn from_channels(n_channels: usize, first_scored: usize, channel: Vec<f64>) -> Self {
        let global = channel
            .chunks(n_channels)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self {
            n_channels,
            first_scored,
            channel,
            global,
        }
    }
}

/// Squared prediction error per timestep and channel, averaged over all
/// sample targets covering that timestep. Uncovered cells are `None`.
pub fn raw_errors(
    model: &Darts,
    samples: &[TrainingSample<'_>],
    len: usize,
    chunk: usize,
) -> Result<Vec<Option<f64>>> {
    let n = model.n_channels();
    let w = model.config().window;
    let mut sum = vec![0.0; len * n];
    let mut count = vec![0usize; len];
    for part in samples.chunks(chunk.max(1)) {
        let preds = model.predict(part, chunk)?;
        for (s, pred) in part.iter().zip(&preds) {
            let target = s.target();
            let span = s.target_span();
            for (k, t) in span.enumerate() {
                count[t] += 1;
                for c in 0..n {
                    let e = pred.data()[c * w + k] - target[c * w + k];
                    sum[t * n + c] += e * e;
                }
            }
        }
    }
    Ok(sum
        .iter()
        .enumerate()
        .map(|(i, &s)| (count[i / n] > 0).then(|| s / count[i / n] as f64))
        .collect())
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-channel median and floored IQR of the covered raw errors.
pub fn fit_calibration(raw: &[Option<f64>], n_channels: usize) -> Result<Calibration> {
    let mut median = Vec::with_capacity(n_channels);
    let mut iqr = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let mut v: Vec<f64> = raw.iter().skip(c).step_by(n_channels).flatten().copied().collect();
        if v.is_empty() {
            return Err(DartsError::contract("no validation errors to calibrate on"));
        }
        v.sort_by(f64::total_cmp);
        median.push(quantile(&v, 0.5));
        iqr.push((quantile(&v, 0.75) - quantile(&v, 0.25)).max(IQR_FLOOR));
    }
    Ok(Calibration { median, iqr })
}

/// Fits and stores the calibration from the model's errors over the span of
/// `validation`, re-sampled at the scoring `stride`.
pub fn calibrate(model: &mut Darts, validation: &[TrainingSample<'_>], stride: usize, chunk: usize) -> Result<()> {
    let (first, last) = match (validation.first(), validation.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(DartsError::contract("empty validation set")),
    };
    let mut origins: Vec<usize> = (first.origin..=last.origin).step_by(stride.max(1)).collect();
    if origins.last() != Some(&last.origin) {
        origins.push(last.origin);
    }
    let samples = samples_at(first.dataset, first.layout, &origins);
    let raw = raw_errors(model, &samples, first.dataset.len(), chunk)?;
    model.metadata.calibration = Some(fit_calibration(&raw, model.n_channels())?);
    Ok(())
}

/// Scores every timestep of `ds` from targets placed every `stride` steps
/// (plus one aligned to the end). Stride 1 averages over all `w` windows
/// covering a timestep; stride `w` uses exactly one.
pub fn score(model: &Darts, ds: &TimeSeriesDataset, stride: usize, chunk: usize) -> Result<ScoreSet> {
    let cal = model
        .metadata
        .calibration
        .as_ref()
        .ok_or_else(|| DartsError::contract("model has no score calibration; train it first"))?;
    if ds.n_channels() != model.n_channels() {
        return Err(DartsError::shape(format!(
            "dataset has {} channels, model expects {}",
            ds.n_channels(),
            model.n_channels()
        )));
    }
    if stride == 0 || stride > model.config().window {
        return Err(DartsError::config(format!(
            "scoring stride must be in 1..={}",
            model.config().window
        )));
    }
    let layout = model.config().layout();
    let origins = layout.covering_origins(ds.len(), stride)?;
    let samples = samples_at(ds, layout, &origins);
    let raw = raw_errors(model, &samples, ds.len(), chunk)?;
    let n = model.n_channels();
    let first = layout.history + layout.window;
    let channel = raw
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Some(r) if i / n >= first => (r - cal.median[i % n]) / cal.iqr[i % n],
            _ => 0.0,
        })
        .collect();
    Ok(ScoreSet::from_channels(n, first, channel))
}

/// Baseline without a model: `|x - mean| / std` per channel with training
/// statistics, maximum over channels. `ds` is expected to be standardized.
pub fn zscore_baseline(ds: &TimeSeriesDataset, first_scored: usize) -> ScoreSet {
    let n = ds.n_channels();
    let channel = ds
        .values()
        .iter()
        .enumerate()
        .map(|(i, v)| if i / n >= first_scored { v.abs() } else { 0.0 })
        .collect();
    ScoreSet::from_channels(n, first_scored.min(ds.len()), channel)
}
