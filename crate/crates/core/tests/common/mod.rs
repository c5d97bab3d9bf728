//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use darts::autodiff::Tensor;

/// Central finite differences of a scalar function with respect to each input tensor.
pub fn finite_diff(f: &mut dyn FnMut(&[Tensor]) -> f64, inputs: &[Tensor], step: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = vec![0.0; inputs[k].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = f(&work);
            work[k].data_mut()[i] = orig - step;
            let down = f(&work);
            work[k].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * step);
        }
        out.push(Tensor::new(inputs[k].shape().to_vec(), g).unwrap());
    }
    out
}

/// Relative error with an absolute floor so vanishing gradients compare sanely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}

/// Naive triple-loop product used as an independent matmul reference.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Brute-force point adjustment: rescans the truth sequence per position.
pub fn brute_point_adjust(pred: &[bool], truth: &[bool]) -> Vec<bool> {
    let n = truth.len();
    let mut out = pred.to_vec();
    for t in 0..n {
        if !truth[t] {
            continue;
        }
        let mut lo = t;
        while lo > 0 && truth[lo - 1] {
            lo -= 1;
        }
        let mut hi = t;
        while hi + 1 < n && truth[hi + 1] {
            hi += 1;
        }
        if (lo..=hi).any(|i| pred[i]) {
            out[t] = true;
        }
    }
    out
}

/// Precision, recall, F1 from raw predictions and labels.
pub fn prf(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = pred.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fn_ = pred.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Exhaustive threshold sweep: tries every distinct score, point-adjusts, keeps the best F1
/// (ties toward higher precision).
pub fn brute_best_f1(scores: &[f64], truth: &[bool]) -> (f64, f64, f64, f64) {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cands.dedup();
    // descending, so exact ties keep the highest threshold
    let mut best = (f64::NAN, -1.0, -1.0, -1.0);
    for &thr in &cands {
        let pred: Vec<bool> = scores.iter().map(|&s| s >= thr).collect();
        let adj = brute_point_adjust(&pred, truth);
        let (p, r, f) = prf(&adj, truth);
        if f > best.3 || (f == best.3 && p > best.1) {
            best = (thr, p, r, f);
        }
    }
    best
}
