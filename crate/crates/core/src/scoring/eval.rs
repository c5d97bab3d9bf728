//! Thresholding and point-adjusted precision, recall and F1.

use serde::{Deserialize, Serialize};

use crate::error::{DartsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "threshold")]
pub enum ThresholdMode {
    /// Threshold maximizing the point-adjusted F1.
    BestF1,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    pub threshold: f64,
    /// `global_scores >= threshold`.
    pub decisions: Vec<bool>,
    /// Decisions after point adjustment.
    pub adjusted: Vec<bool>,
    pub metrics: Metrics,
}

/// Marks a whole true segment positive when any of its points is predicted.
pub fn point_adjust(pred: &[bool], truth: &[bool]) -> Result<Vec<bool>> {
    if pred.len() != truth.len() {
        return Err(DartsError::contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut out = pred.to_vec();
    for (start, end) in segments(truth) {
        if pred[start..end].iter().any(|&p| p) {
            out[start..end].iter_mut().for_each(|p| *p = true);
        }
    }
    Ok(out)
}

/// Maximal runs of `true` as half-open ranges.
pub fn segments(truth: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &t) in truth.iter().enumerate() {
        match (t, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, truth.len()));
    }
    out
}

pub fn confusion(pred: &[bool], truth: &[bool]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    c
}

fn report_at(scores: &[f64], truth: &[bool], threshold: f64) -> Result<AnomalyReport> {
    let decisions: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let adjusted = point_adjust(&decisions, truth)?;
    let (tp, fp, fn_) = confusion(&adjusted, truth);
    Ok(AnomalyReport {
        threshold,
        decisions,
        adjusted,
        metrics: Metrics::from_counts(tp, fp, fn_),
    })
}

/// Threshold with the best point-adjusted F1 among all distinct score values,
/// ties going to the higher precision and then to the higher threshold.
///
/// A segment is detected at threshold `θ` exactly when its maximum score is
/// `>= θ`, so one descending sweep over the sorted scores suffices.
pub fn best_threshold(scores: &[f64], truth: &[bool]) -> Result<(f64, Metrics)> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(DartsError::contract(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(DartsError::NonFinite {
            term: "anomaly scores".into(),
            detail: format!("value {s}"),
        });
    }
    let segs = segments(truth);
    let positives: usize = segs.iter().map(|(a, b)| b - a).sum();
    // events: (score, true-positive gain, false-positive gain)
    let mut events: Vec<(f64, usize, usize)> = segs
        .iter()
        .map(|&(a, b)| {
            let m = scores[a..b].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (m, b - a, 0)
        })
        .collect();
    events.extend(
        scores
            .iter()
            .zip(truth)
            .filter(|(_, &t)| !t)
            .map(|(&s, _)| (s, 0, 1)),
    );
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0, 0);
    let mut best: Option<(f64, Metrics)> = None;
    let mut i = 0;
    while i < events.len() {
        let th = events[i].0;
        while i < events.len() && events[i].0 == th {
            tp += events[i].1;
            fp += events[i].2;
            i += 1;
        }
        let m = Metrics::from_counts(tp, fp, positives - tp);
        let better = match &best {
            None => true,
            Some((_, b)) => m.f1 > b.f1 || (m.f1 == b.f1 && m.precision > b.precision),
        };
        if better {
            best = Some((th, m));
        }
    }
    Ok(best.expect("nonempty scores"))
}

pub fn evaluate(scores: &[f64], truth: &[bool], mode: ThresholdMode) -> Result<AnomalyReport> {
    if scores.is_empty() {
        return Err(DartsError::contract("no scores to evaluate"));
    }
    let threshold = match mode {
        ThresholdMode::BestF1 => best_threshold(scores, truth)?.0,
        ThresholdMode::Fixed(t) => t,
    };
    report_at(scores, truth, threshold)
}

/// Mean F1 over reports.
pub fn average_f1(reports: &[AnomalyReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(DartsError::contract("no reports to average"));
    }
    Ok(reports.iter().map(|r| r.metrics.f1).sum::<f64>() / reports.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjusts_partially_detected_segment() {
        let t = [false, true, true, true, false];
        let p = [false, false, true, false, false];
        assert_eq!(point_adjust(&p, &t).unwrap(), vec![false, true, true, true, false]);
    }

    #[test]
    fn separable_scores_are_perfect() {
        let s = [0.1, 0.2, 0.9, 0.8, 0.1];
        let t = [false, false, true, true, false];
        let r = evaluate(&s, &t, ThresholdMode::BestF1).unwrap();
        assert_eq!(r.metrics.f1, 1.0);
        // 0.8 gives the same adjusted decisions; the higher threshold wins
        assert_eq!(r.threshold, 0.9);
    }

    #[test]
    fn nothing_flagged_gives_zero() {
        let r = evaluate(&[0.0, 0.0], &[true, false], ThresholdMode::Fixed(1.0)).unwrap();
        assert_eq!(r.metrics, Metrics::default());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(point_adjust(&[true], &[true, false]).is_err());
        assert!(evaluate(&[], &[], ThresholdMode::BestF1).is_err());
    }
}
