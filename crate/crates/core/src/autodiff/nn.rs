//! Composite layers built from tape primitives.

use super::tape::{Tape, Var};
use crate::error::Result;

/// Feature normalization over the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormForm {
    /// `(x - mean) / sqrt(var + eps) * alpha + beta`
    #[default]
    Standard,
    /// `(x - mean) / var + eps * alpha + beta`, as literally printed for the long-term path.
    Literal,
}

/// `x · w (+ b)` over the last axis.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Normalizes over the last axis, then applies per-feature scale `alpha` and shift `beta`.
pub fn layer_norm(
    tape: &mut Tape,
    x: Var,
    alpha: Var,
    beta: Var,
    eps: f64,
    form: NormForm,
) -> Result<Var> {
    let axis = tape.shape(x).len() - 1;
    let centered = center(tape, x, axis)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, axis)?;
    match form {
        NormForm::Standard => {
            let v = tape.add_scalar(var, eps);
            let sd = tape.sqrt(v)?;
            let z = tape.div(centered, sd)?;
            let scaled = tape.mul(z, alpha)?;
            tape.add(scaled, beta)
        }
        NormForm::Literal => {
            let z = tape.div(centered, var)?;
            let ea = tape.mul_scalar(alpha, eps);
            let z = tape.add(z, ea)?;
            tape.add(z, beta)
        }
    }
}

/// Zero-mean, unit-variance standardization along `axis` without learned parameters.
pub fn standardize_axis(tape: &mut Tape, x: Var, axis: usize, eps: f64) -> Result<Var> {
    let centered = center(tape, x, axis)?;
    let sq = tape.square(centered);
    let var = tape.mean_axis(sq, axis)?;
    let v = tape.add_scalar(var, eps);
    let sd = tape.sqrt(v)?;
    tape.div(centered, sd)
}

fn center(tape: &mut Tape, x: Var, axis: usize) -> Result<Var> {
    let mean = tape.mean_axis(x, axis)?;
    tape.sub(x, mean)
}
