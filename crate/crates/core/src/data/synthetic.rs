//! Synthetic multichannel series with labeled anomaly segments.
//!
//! Channels are sparse mixtures of a few latent drivers (quasi-periodic
//! sinusoids with an AR(1) component) plus independent noise, expressed in
//! arbitrary per-channel units. The test split carries three anomaly kinds:
//!
//! * `spike`: short bursts of large impulses on a subset of channels;
//! * `level_shift`: a constant offset over the segment;
//! * `correlation_break`: affected channels stop following their drivers and
//!   are replaced by an independent signal with the same mean and scale.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{default_names, TimeSeriesDataset};
use crate::error::{DartsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    CorrelationBreak,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [Self::Spike, Self::LevelShift, Self::CorrelationBreak];

    fn length_range(self) -> (usize, usize) {
        match self {
            Self::Spike => (2, 8),
            Self::LevelShift => (20, 80),
            Self::CorrelationBreak => (40, 120),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_channels: usize,
    /// Total length, split into train and test by `train_fraction`.
    pub length: usize,
    pub n_drivers: usize,
    pub anomaly_ratio: f64,
    /// Empty means no anomaly segments at all.
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub train_fraction: f64,
    /// Per-channel observation noise, relative to unit driver scale.
    pub noise_std: f64,
    /// Test timesteps before this index are kept normal.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_channels: 20,
            length: 8000,
            n_drivers: 6,
            anomaly_ratio: 0.06,
            anomaly_kinds: AnomalyKind::ALL.to_vec(),
            train_fraction: 0.5,
            noise_std: 0.1,
            warmup: 400,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySegment {
    pub kind: AnomalyKind,
    /// Test-split timestep range `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    /// Ground-truth `N x n_drivers` mixing weights, row-major.
    pub mixing: Vec<f64>,
    pub segments: Vec<AnomalySegment>,
}

impl SyntheticData {
    /// Channels that share at least one driver with `channel`.
    pub fn related_channels(&self, channel: usize) -> Vec<usize> {
        let k = self.mixing.len() / self.train.n_channels();
        let row = |c: usize| &self.mixing[c * k..(c + 1) * k];
        (0..self.train.n_channels())
            .filter(|&c| c != channel && row(c).iter().zip(row(channel)).any(|(a, b)| *a != 0.0 && *b != 0.0))
            .collect()
    }
}

fn ar1(len: usize, phi: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut x: f64 = StandardNormal.sample(rng);
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            x = phi * x + innov * z;
            x
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_channels < 2 {
        return Err(DartsError::Parameter("synthetic data needs at least 2 channels".into()));
    }
    if !spec.anomaly_kinds.is_empty() && !(spec.anomaly_ratio > 0.0 && spec.anomaly_ratio < 0.5) {
        return Err(DartsError::Parameter(format!(
            "anomaly ratio must lie in (0, 0.5), got {}",
            spec.anomaly_ratio
        )));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) || spec.n_drivers == 0 {
        return Err(DartsError::Parameter(
            "train_fraction must lie in (0, 1) and n_drivers must be positive".into(),
        ));
    }
    let train_len = (spec.length as f64 * spec.train_fraction).round() as usize;
    let test_len = spec.length.saturating_sub(train_len);
    if train_len < 2 || test_len <= spec.warmup + 10 {
        return Err(DartsError::InsufficientData {
            required: spec.warmup + 11 + train_len,
            actual: spec.length,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, k, len) = (spec.n_channels, spec.n_drivers, spec.length);

    // latent drivers
    let drivers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let p1 = rng.gen_range(20.0..120.0);
            let p2 = rng.gen_range(8.0..40.0);
            let (f1, f2): (f64, f64) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
            let wander = ar1(len, 0.97, &mut rng);
            (0..len)
                .map(|t| {
                    let t = t as f64;
                    (std::f64::consts::TAU * t / p1 + f1).sin()
                        + 0.5 * (std::f64::consts::TAU * t / p2 + f2).sin()
                        + 0.3 * wander[t as usize]
                })
                .collect()
        })
        .collect();

    // sparse mixing: every channel loads on one or two drivers
    let mut mixing = vec![0.0; n * k];
    for c in 0..n {
        let primary = c % k;
        mixing[c * k + primary] = rng.gen_range(0.7..1.3) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        if k > 1 && rng.gen_bool(0.5) {
            let second = (primary + rng.gen_range(1..k)) % k;
            mixing[c * k + second] = rng.gen_range(0.3..0.7) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    let scale: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..5.0)).collect();
    let offset: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();

    // latent (unit-scale) signal, row-major len x n
    let mut latent = vec![0.0; len * n];
    for t in 0..len {
        for c in 0..n {
            let mut v = 0.0;
            for d in 0..k {
                let w = mixing[c * k + d];
                if w != 0.0 {
                    v += w * drivers[d][t];
                }
            }
            let z: f64 = StandardNormal.sample(&mut rng);
            latent[t * n + c] = v + spec.noise_std * z;
        }
    }

    let (train_latent, test_latent) = latent.split_at_mut(train_len * n);
    let mut labels = vec![false; test_len];
    let mut segments = Vec::new();
    if !spec.anomaly_kinds.is_empty() {
        // per-channel scale of the clean test signal
        let mut mean = vec![0.0; n];
        let mut sd = vec![0.0; n];
        for row in test_latent.chunks(n) {
            for c in 0..n {
                mean[c] += row[c] / test_len as f64;
            }
        }
        for row in test_latent.chunks(n) {
            for c in 0..n {
                sd[c] += (row[c] - mean[c]).powi(2) / test_len as f64;
            }
        }
        sd.iter_mut().for_each(|s| *s = s.sqrt());

        let target = (spec.anomaly_ratio * test_len as f64).round() as usize;
        let mut labeled = 0;
        let mut attempts = 0;
        let gap = 20;
        let all_channels: Vec<usize> = (0..n).collect();
        let max_affected = (n / 10).max(3).min(n);
        while labeled < target && attempts < 10_000 {
            attempts += 1;
            let kind = *spec.anomaly_kinds.choose(&mut rng).unwrap();
            let (lo, hi) = kind.length_range();
            let seg_len = rng.gen_range(lo..=hi).min(target - labeled).max(1);
            if spec.warmup + seg_len >= test_len {
                continue;
            }
            let start = rng.gen_range(spec.warmup..test_len - seg_len);
            let end = start + seg_len;
            let clash = segments
                .iter()
                .any(|s: &AnomalySegment| start < s.end + gap && s.start < end + gap);
            if clash {
                continue;
            }
            let n_aff = rng.gen_range(3.min(n)..=max_affected);
            let mut channels: Vec<usize> = all_channels.choose_multiple(&mut rng, n_aff).copied().collect();
            channels.sort_unstable();
            for &c in &channels {
                match kind {
                    AnomalyKind::Spike => {
                        for t in start..end {
                            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                            test_latent[t * n + c] += sign * rng.gen_range(4.0..7.0) * sd[c];
                        }
                    }
                    AnomalyKind::LevelShift => {
                        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                        let shift = sign * rng.gen_range(2.0..3.0) * sd[c];
                        for t in start..end {
                            test_latent[t * n + c] += shift;
                        }
                    }
                    AnomalyKind::CorrelationBreak => {
                        let replacement = ar1(seg_len, 0.9, &mut rng);
                        for (t, r) in (start..end).zip(replacement) {
                            test_latent[t * n + c] = mean[c] + sd[c] * r;
                        }
                    }
                }
            }
            labels[start..end].iter_mut().for_each(|l| *l = true);
            labeled += seg_len;
            segments.push(AnomalySegment {
                kind,
                start,
                end,
                channels,
            });
        }
        segments.sort_by_key(|s| s.start);
    }

    let observe = |block: &[f64]| -> Vec<f64> {
        block
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i % n] + offset[i % n])
            .collect()
    };
    let names = default_names(n);
    let train = TimeSeriesDataset::new(observe(train_latent), names.clone(), None)?;
    let test = TimeSeriesDataset::new(observe(test_latent), names, Some(labels))?;
    Ok(SyntheticData {
        train,
        test,
        mixing,
        segments,
    })
}
