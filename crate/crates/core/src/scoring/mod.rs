//! Anomaly scores, thresholds and point-adjusted metrics.

mod eval;
pub mod export;
mod score;

pub use eval::{
    average_f1, best_threshold, confusion, evaluate, point_adjust, segments, AnomalyReport, Metrics, ThresholdMode,
};
pub use score::{calibrate, fit_calibration, quantile, raw_errors, score, zscore_baseline, ScoreSet, IQR_FLOOR};
