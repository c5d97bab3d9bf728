use serde::{Deserialize, Serialize};

use crate::error::{DartsError, Result};

/// Channels whose training standard deviation falls below this are treated as constant.
pub const CONSTANT_STD: f64 = 1e-8;

/// An `L x N` multichannel series stored row-major (one row per timestep).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    values: Vec<f64>,
    len: usize,
    n_channels: usize,
    channel_names: Vec<String>,
    labels: Option<Vec<bool>>,
    stats: Option<Standardization>,
}

/// Per-channel affine map fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels that were constant in training and therefore only shifted.
    pub constant: Vec<bool>,
}

impl Standardization {
    pub fn fit(ds: &TimeSeriesDataset) -> Self {
        let n = ds.n_channels;
        let l = ds.len as f64;
        let mut mean = vec![0.0; n];
        for row in ds.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= l);
        let mut var = vec![0.0; n];
        for row in ds.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut constant = vec![false; n];
        let std = var
            .iter()
            .zip(constant.iter_mut())
            .map(|(s, c)| {
                let sd = (s / l).sqrt();
                if sd < CONSTANT_STD {
                    *c = true;
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std, constant }
    }

    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(ds)?;
        let mut out = ds.clone();
        let n = ds.n_channels;
        for (i, v) in out.values.iter_mut().enumerate() {
            let c = i % n;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out.stats = Some(self.clone());
        Ok(out)
    }

    pub fn invert(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(ds)?;
        let mut out = ds.clone();
        let n = ds.n_channels;
        for (i, v) in out.values.iter_mut().enumerate() {
            let c = i % n;
            *v = *v * self.std[c] + self.mean[c];
        }
        out.stats = None;
        Ok(out)
    }

    fn check(&self, ds: &TimeSeriesDataset) -> Result<()> {
        if ds.n_channels != self.n_channels() {
            return Err(DartsError::shape(format!(
                "dataset has {} channels, statistics cover {}",
                ds.n_channels,
                self.n_channels()
            )));
        }
        Ok(())
    }
}

impl TimeSeriesDataset {
    /// `values` is row-major `len x channel_names.len()`.
    pub fn new(values: Vec<f64>, channel_names: Vec<String>, labels: Option<Vec<bool>>) -> Result<Self> {
        let n = channel_names.len();
        if n == 0 {
            return Err(DartsError::shape("dataset needs at least one channel"));
        }
        if values.is_empty() || values.len() % n != 0 {
            return Err(DartsError::shape(format!(
                "{} values do not form rows of {n} channels",
                values.len()
            )));
        }
        let len = values.len() / n;
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(DartsError::shape(format!(
                    "{} labels for {len} timesteps",
                    l.len()
                )));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DartsError::format(
                format!("row {}, column {}", i / n, i % n),
                "missing or non-finite value",
            ));
        }
        Ok(Self {
            values,
            len,
            n_channels: n,
            channel_names,
            labels,
            stats: None,
        })
    }

    /// Dataset with generated channel names `ch0..`.
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<bool>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(DartsError::shape("ragged rows"));
        }
        Self::new(rows.concat(), default_names(n), labels)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn stats(&self) -> Option<&Standardization> {
        self.stats.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.n_channels + channel]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_channels..(t + 1) * self.n_channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_channels)
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        self.rows().map(|r| r[channel]).collect()
    }

    /// Fraction of labeled-anomalous timesteps; `None` when unlabeled.
    pub fn anomaly_ratio(&self) -> Option<f64> {
        self.labels
            .as_ref()
            .map(|l| l.iter().filter(|&&b| b).count() as f64 / l.len() as f64)
    }

    pub fn with_labels(mut self, labels: Option<Vec<bool>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.len {
                return Err(DartsError::shape("label count differs from length"));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    /// Contiguous timesteps `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(DartsError::contract(format!(
                "slice [{start}, {end}) out of range for length {}",
                self.len
            )));
        }
        let mut out = Self::new(
            self.values[start * self.n_channels..end * self.n_channels].to_vec(),
            self.channel_names.clone(),
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )?;
        out.stats = self.stats.clone();
        Ok(out)
    }
}

pub(crate) fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("ch{i}")).collect()
}

/// Standardizes `train` and every dataset in `others` with the training statistics.
pub fn standardize(
    train: &TimeSeriesDataset,
    others: &[&TimeSeriesDataset],
) -> Result<(TimeSeriesDataset, Vec<TimeSeriesDataset>)> {
    if train.labels().is_some_and(|l| l.iter().any(|&b| b)) {
        return Err(DartsError::contract(
            "training data must contain only normal timesteps",
        ));
    }
    let stats = Standardization::fit(train);
    let t = stats.apply(train)?;
    let rest = others.iter().map(|d| stats.apply(d)).collect::<Result<_>>()?;
    Ok((t, rest))
}
