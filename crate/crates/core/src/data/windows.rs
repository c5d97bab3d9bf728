//! Sliding-window sample construction.
//!
//! A sample at origin `i` reads the history `[i - h, i)`, the short window
//! `[i, i + w)` and the prediction target `[i + w, i + 2w)`.

use serde::{Deserialize, Serialize};

use super::dataset::TimeSeriesDataset;
use crate::error::{DartsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowLayout {
    /// Short window length `w`.
    pub window: usize,
    /// Raw history length `h`; must be a multiple of `window`.
    pub history: usize,
    /// Origin step `s` between consecutive training samples.
    pub stride: usize,
}

impl Default for WindowLayout {
    fn default() -> Self {
        Self {
            window: 30,
            history: 300,
            stride: 5,
        }
    }
}

impl WindowLayout {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 || self.history == 0 {
            return Err(DartsError::config("window, history and stride must be positive"));
        }
        if self.history < self.window || self.history % self.window != 0 {
            return Err(DartsError::config(format!(
                "history {} must be a positive multiple of window {}",
                self.history, self.window
            )));
        }
        Ok(())
    }

    /// Number of pooled history windows `T = h / w`.
    pub fn n_context(&self) -> usize {
        self.history / self.window
    }

    /// Shortest series that yields one sample.
    pub fn min_len(&self) -> usize {
        self.history + 2 * self.window
    }

    /// Sample origins `h, h + s, ...` with `i + 2w - 1 < len`.
    pub fn origins(&self, len: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if len < self.min_len() {
            return Err(DartsError::InsufficientData {
                required: self.min_len(),
                actual: len,
            });
        }
        let last = len - 2 * self.window;
        Ok((self.history..=last).step_by(self.stride).collect())
    }

    /// Origins with step `stride` that additionally include the final origin,
    /// so every timestep from `h + w` onward is covered by some target window.
    pub fn covering_origins(&self, len: usize, stride: usize) -> Result<Vec<usize>> {
        let dense = WindowLayout { stride, ..*self };
        let mut origins = dense.origins(len)?;
        let last = len - 2 * self.window;
        if *origins.last().unwrap() != last {
            origins.push(last);
        }
        Ok(origins)
    }
}

/// One `(history, window, target)` triple, borrowed from its dataset.
#[derive(Clone, Copy, Debug)]
pub struct TrainingSample<'a> {
    pub dataset: &'a TimeSeriesDataset,
    pub origin: usize,
    pub layout: WindowLayout,
}

impl<'a> TrainingSample<'a> {
    /// Channel-major `N x len` block starting at timestep `start`.
    fn block(&self, start: usize, len: usize) -> Vec<f64> {
        let n = self.dataset.n_channels();
        let mut out = vec![0.0; n * len];
        for t in 0..len {
            for (c, &v) in self.dataset.row(start + t).iter().enumerate() {
                out[c * len + t] = v;
            }
        }
        out
    }

    /// `P_i`, `N x h`.
    pub fn history(&self) -> Vec<f64> {
        self.block(self.origin - self.layout.history, self.layout.history)
    }

    /// `W_i`, `N x w`.
    pub fn window(&self) -> Vec<f64> {
        self.block(self.origin, self.layout.window)
    }

    /// `Y_i`, `N x w`.
    pub fn target(&self) -> Vec<f64> {
        self.block(self.origin + self.layout.window, self.layout.window)
    }

    /// Timesteps predicted by this sample.
    pub fn target_span(&self) -> std::ops::Range<usize> {
        self.origin + self.layout.window..self.origin + 2 * self.layout.window
    }
}

pub fn make_samples(ds: &TimeSeriesDataset, layout: WindowLayout) -> Result<Vec<TrainingSample<'_>>> {
    Ok(samples_at(ds, layout, &layout.origins(ds.len())?))
}

pub fn samples_at<'a>(ds: &'a TimeSeriesDataset, layout: WindowLayout, origins: &[usize]) -> Vec<TrainingSample<'a>> {
    origins
        .iter()
        .map(|&origin| TrainingSample {
            dataset: ds,
            origin,
            layout,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: usize, channels: usize) -> TimeSeriesDataset {
        let rows: Vec<Vec<f64>> = (0..len)
            .map(|t| (0..channels).map(|c| (t * 10 + c) as f64).collect())
            .collect();
        TimeSeriesDataset::from_rows(&rows, None).unwrap()
    }

    #[test]
    fn default_layout_counts() {
        let layout = WindowLayout::default();
        let o = layout.origins(1000).unwrap();
        assert_eq!(o.len(), 129);
        assert_eq!(o[0], 300);
        assert_eq!(layout.n_context(), 10);
    }

    #[test]
    fn exact_minimum_length_gives_one_sample() {
        let layout = WindowLayout::default();
        assert_eq!(layout.origins(360).unwrap(), vec![300]);
        let err = layout.origins(359).unwrap_err();
        assert!(matches!(err, DartsError::InsufficientData { required: 360, actual: 359 }));
    }

    #[test]
    fn history_must_divide() {
        let layout = WindowLayout { window: 7, history: 30, stride: 1 };
        assert!(matches!(layout.origins(100), Err(DartsError::Config(_))));
    }

    #[test]
    fn slices_are_adjacent() {
        let ds = ramp(20, 2);
        let layout = WindowLayout { window: 2, history: 4, stride: 3 };
        let s = make_samples(&ds, layout).unwrap();
        let first = s[0];
        assert_eq!(first.origin, 4);
        // channel 0 values are t*10
        assert_eq!(&first.history()[..4], &[0.0, 10.0, 20.0, 30.0]);
        assert_eq!(&first.window()[..2], &[40.0, 50.0]);
        assert_eq!(&first.target()[..2], &[60.0, 70.0]);
        assert_eq!(&first.target()[2..], &[61.0, 71.0]);
    }

    #[test]
    fn covering_origins_reach_the_tail() {
        let layout = WindowLayout { window: 3, history: 6, stride: 5 };
        let o = layout.covering_origins(20, 3).unwrap();
        assert_eq!(*o.last().unwrap(), 20 - 6);
        assert_eq!(o[0], 6);
    }
}
