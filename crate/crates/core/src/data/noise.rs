use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::TimeSeriesDataset;
use crate::error::{DartsError, Result};

/// Default noise level relative to each channel's standard deviation.
pub const DEFAULT_NOISE_RATIO: f64 = 0.5;

/// Adds independent zero-mean Gaussian noise with per-channel standard
/// deviation `ratio * std(channel)`. Labels are preserved.
pub fn inject_noise<R: Rng + ?Sized>(ds: &TimeSeriesDataset, ratio: f64, rng: &mut R) -> Result<TimeSeriesDataset> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(DartsError::Parameter(format!("noise ratio must be >= 0, got {ratio}")));
    }
    if ratio == 0.0 {
        return Ok(ds.clone());
    }
    let n = ds.n_channels();
    let l = ds.len() as f64;
    let mut mean = vec![0.0; n];
    for row in ds.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / l;
        }
    }
    let mut sd = vec![0.0; n];
    for row in ds.rows() {
        for ((s, v), m) in sd.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m) / l;
        }
    }
    sd.iter_mut().for_each(|s| *s = ratio * s.sqrt());
    let values = ds
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let z: f64 = StandardNormal.sample(rng);
            v + sd[i % n] * z
        })
        .collect();
    Ok(ds.with_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn series(len: usize) -> TimeSeriesDataset {
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|t| vec![(t as f64 * 0.1).sin() * 3.0, (t % 7) as f64 - 2.0])
            .collect();
        let labels = (0..len).map(|t| t % 11 == 0).collect();
        TimeSeriesDataset::from_rows(&rows, Some(labels)).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let ds = series(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_noise(&ds, 0.0, &mut rng).unwrap(), ds);
    }

    #[test]
    fn negative_ratio_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(inject_noise(&series(10), -0.1, &mut rng).is_err());
    }

    #[test]
    fn labels_survive() {
        let ds = series(100);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = inject_noise(&ds, 0.5, &mut rng).unwrap();
        assert_eq!(noisy.labels(), ds.labels());
        assert_ne!(noisy.values(), ds.values());
    }

    #[test]
    fn added_noise_has_requested_scale() {
        let len = 100_000;
        let ds = series(len);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = inject_noise(&ds, 0.5, &mut rng).unwrap();
        for c in 0..2 {
            let clean = ds.column(c);
            let dirty = noisy.column(c);
            let std = |x: &[f64]| {
                let m = x.iter().sum::<f64>() / x.len() as f64;
                (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
            };
            let diff: Vec<f64> = dirty.iter().zip(&clean).map(|(a, b)| a - b).collect();
            let target = 0.5 * std(&clean);
            let got = std(&diff);
            assert!((got / target - 1.0).abs() < 0.03, "channel {c}: {got} vs {target}");
        }
    }
}
