//! Graph-structure regularization and Gaussian likelihood.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DartsError, Result};
use crate::model::KlForm;

const PROB_FLOOR: f64 = 1e-12;

/// Loss terms of one forward pass, on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub kl: Var,
    pub nll: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape, sigma_sq: f64) -> LossTerms {
        LossTerms {
            kl: tape.value(self.kl).item(),
            nll: tape.value(self.nll).item(),
            total: tape.value(self.total).item(),
            sigma_sq,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub kl: f64,
    pub nll: f64,
    pub total: f64,
    pub sigma_sq: f64,
}

impl LossTerms {
    /// Fails with the name of the first non-finite term.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [("kl", self.kl), ("nll", self.nll), ("total", self.total)] {
            if !v.is_finite() {
                return Err(DartsError::NonFinite {
                    term: format!("{name} loss"),
                    detail: format!("value {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Divergence of `probs: [B, H, N, N]` from the per-head edge priors, summed
/// over heads and the entries selected by `mask: [N, N]`, averaged over the batch.
pub fn kl_loss(tape: &mut Tape, probs: Var, mask: &Tensor, priors: &[f64], form: KlForm) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 4 || s[1] != priors.len() || s[2..] != *mask.shape() {
        return Err(DartsError::shape(format!(
            "edge probabilities {s:?} with {} priors and mask {:?}",
            priors.len(),
            mask.shape()
        )));
    }
    if let Some(p) = priors.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(DartsError::Parameter(format!("edge prior {p} outside (0, 1)")));
    }
    let h = priors.len();
    let log_prior = tape.constant(Tensor::new(vec![h, 1, 1], priors.iter().map(|p| p.ln()).collect())?);
    let p = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let lp = tape.log(p)?;
    let ratio = tape.sub(lp, log_prior)?;
    let mut per_edge = tape.mul(p, ratio)?;
    if form == KlForm::Bernoulli {
        let log_q_prior = tape.constant(Tensor::new(vec![h, 1, 1], priors.iter().map(|p| (1.0 - p).ln()).collect())?);
        let q = tape.rsub_scalar(1.0, p);
        let lq = tape.log(q)?;
        let ratio = tape.sub(lq, log_q_prior)?;
        let t = tape.mul(q, ratio)?;
        per_edge = tape.add(per_edge, t)?;
    }
    let m = tape.constant(mask.clone());
    let masked = tape.mul(per_edge, m)?;
    let total = tape.sum(masked);
    Ok(tape.mul_scalar(total, 1.0 / s[0] as f64))
}

/// `sum (O - Y)^2 / (2 sigma^2) + count / 2 * log(2 pi sigma^2)` per sample,
/// with `count` the elements of one sample, averaged over the leading batch axis.
pub fn gaussian_nll(tape: &mut Tape, prediction: Var, target: Var, log_sigma_sq: Var) -> Result<Var> {
    let s = tape.shape(prediction).to_vec();
    if s != tape.shape(target) || s.is_empty() {
        return Err(DartsError::shape(format!(
            "prediction {s:?} and target {:?} differ",
            tape.shape(target)
        )));
    }
    let batch = s[0] as f64;
    let count = s[1..].iter().product::<usize>() as f64;
    let diff = tape.sub(prediction, target)?;
    let sq = tape.square(diff);
    let sse = tape.sum(sq);
    let neg = tape.neg(log_sigma_sq);
    let inv = tape.exp(neg).map_err(|_| DartsError::NonFinite {
        term: "nll loss".into(),
        detail: format!("log variance {}", tape.value(log_sigma_sq).data()[0]),
    })?;
    let fit = tape.mul(sse, inv)?;
    let fit = tape.mul_scalar(fit, 0.5 / batch);
    let norm = tape.add_scalar(log_sigma_sq, (2.0 * std::f64::consts::PI).ln());
    let norm = tape.mul_scalar(norm, 0.5 * count);
    tape.add(fit, norm)
}
