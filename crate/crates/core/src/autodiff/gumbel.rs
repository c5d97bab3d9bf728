//! Gumbel-Softmax relaxation of categorical sampling over the last axis.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{DartsError, Result};

const UNIFORM_EPS: f64 = 1e-12;

/// Standard Gumbel(0, 1) draws, `-ln(-ln u)` with `u` kept away from 0 and 1.
pub fn gumbel_noise<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// One-hot of the per-row argmax over the last axis. Ties resolve to the lowest index.
pub fn one_hot_argmax(t: &Tensor) -> Tensor {
    let cols = *t.shape().last().expect("one_hot_argmax of a scalar");
    let mut out = vec![0.0; t.numel()];
    for (row, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
        let mut best = 0;
        for j in 1..cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        dst[best] = 1.0;
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// `softmax((logits + g) / tau)` with fresh Gumbel noise `g`.
///
/// With `hard` the forward value is the one-hot argmax of the soft sample
/// while gradients flow through the soft sample (straight-through).
pub fn gumbel_softmax<R: Rng + ?Sized>(
    tape: &mut Tape,
    logits: Var,
    tau: f64,
    hard: bool,
    rng: &mut R,
) -> Result<Var> {
    let noise = gumbel_noise(tape.shape(logits), rng);
    gumbel_softmax_with_noise(tape, logits, noise, tau, hard)
}

/// Same as [`gumbel_softmax`] with caller-provided noise.
pub fn gumbel_softmax_with_noise(
    tape: &mut Tape,
    logits: Var,
    noise: Tensor,
    tau: f64,
    hard: bool,
) -> Result<Var> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(DartsError::Parameter(format!(
            "gumbel temperature must be positive, got {tau}"
        )));
    }
    if !tape.value(logits).all_finite() {
        return Err(DartsError::NonFinite {
            term: "gumbel logits".into(),
            detail: "logits must be finite".into(),
        });
    }
    let g = tape.constant(noise);
    let perturbed = tape.add(logits, g)?;
    let scaled = tape.mul_scalar(perturbed, 1.0 / tau);
    let soft = tape.softmax(scaled, None)?;
    if !hard {
        return Ok(soft);
    }
    let hard_value = one_hot_argmax(tape.value(soft));
    tape.straight_through(soft, hard_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_positive_tau() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            gumbel_softmax(&mut tape, l, 0.0, false, &mut rng),
            Err(DartsError::Parameter(_))
        ));
        assert!(gumbel_softmax(&mut tape, l, -1.0, true, &mut rng).is_err());
    }

    #[test]
    fn hard_samples_are_one_hot() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::new(vec![50, 2], (0..100).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = gumbel_softmax(&mut tape, l, 0.5, true, &mut rng).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(row[0] + row[1], 1.0);
        }
    }

    #[test]
    fn high_temperature_flattens_equal_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[200, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = gumbel_softmax(&mut tape, l, 1e6, false, &mut rng).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-4);
        }
    }
}
