//! Cross-attention from short-term tokens to long-term context, per channel,
//! and the projection to next-window predictions.

use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::nn::{layer_norm, NormForm};
use crate::autodiff::params::xavier;
use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{DartsError, Result};

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `[B, N, w, d_v]`
    pub z: Var,
    /// `[B, N, w, T]` attention weights; `None` when attention is disabled.
    pub weights: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    d: usize,
    d_k: usize,
    window: usize,
    eps: f64,
    norm1: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let dk = cfg.d_k();
        let w = cfg.window;
        let norm = |name: &str, store: &mut ParamStore| {
            (
                store.add(format!("fusion.{name}.alpha"), Tensor::ones(&[d])),
                store.add(format!("fusion.{name}.beta"), Tensor::zeros(&[d])),
            )
        };
        let norm1 = norm("norm_short", store);
        let norm2 = norm("norm_long", store);
        Self {
            d,
            d_k: dk,
            window: w,
            eps: cfg.eps,
            norm1,
            norm2,
            wq: store.add("fusion.query", xavier(&[d, dk], d, dk, rng)),
            wk: store.add("fusion.key", xavier(&[d, dk], d, dk, rng)),
            wv: store.add("fusion.value", xavier(&[d, dk], d, dk, rng)),
            out_w: store.add("fusion.out.weight", xavier(&[w * dk, w], w * dk, w, rng)),
            out_b: store.add("fusion.out.bias", Tensor::zeros(&[w])),
        }
    }

    /// Normalizes both paths over features. Inputs and outputs are time-major,
    /// `[B, w, N, d]` and `[B, T, N, d]`.
    pub fn align(&self, tape: &mut Tape, p: &Bound, short: Var, long: Var) -> Result<(Var, Var)> {
        let (a, b) = (tape.shape(short).to_vec(), tape.shape(long).to_vec());
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] || a[3] != self.d {
            return Err(DartsError::shape(format!(
                "cannot fuse short-term {a:?} with long-term {b:?}"
            )));
        }
        let t1 = layer_norm(tape, short, p.get(self.norm1.0), p.get(self.norm1.1), self.eps, NormForm::Standard)?;
        let t2 = layer_norm(tape, long, p.get(self.norm2.0), p.get(self.norm2.1), self.eps, NormForm::Standard)?;
        Ok((t1, t2))
    }

    /// Per-channel attention of each short-window step over the context tokens.
    pub fn cross_attend(&self, tape: &mut Tape, p: &Bound, t1: Var, t2: Var) -> Result<Attended> {
        let a = tape.shape(t1).to_vec();
        let ctx = tape.shape(t2)[1];
        let (b, w, n, d) = (a[0], a[1], a[2], a[3]);
        let q = channel_major(tape, t1, b * n, w, d)?;
        let kv = channel_major(tape, t2, b * n, ctx, d)?;
        let q = tape.matmul(q, p.get(self.wq))?;
        let k = tape.matmul(kv, p.get(self.wk))?;
        let v = tape.matmul(kv, p.get(self.wv))?;
        let s = tape.bmm(q, k, true)?;
        let s = tape.mul_scalar(s, 1.0 / (self.d_k as f64).sqrt());
        let att = tape.softmax(s, None)?;
        let z = tape.bmm(att, v, false)?;
        Ok(Attended {
            z: tape.reshape(z, &[b, n, w, self.d_k])?,
            weights: Some(tape.reshape(att, &[b, n, w, ctx])?),
        })
    }

    /// Attention-free fusion: `(T1 + mean_T T2) Wv`.
    pub fn mean_context(&self, tape: &mut Tape, p: &Bound, t1: Var, t2: Var) -> Result<Attended> {
        let m = tape.mean_axis(t2, 1)?;
        let x = tape.add(t1, m)?;
        let z = tape.matmul(x, p.get(self.wv))?;
        Ok(Attended {
            z: tape.permute(z, &[0, 2, 1, 3])?,
            weights: None,
        })
    }

    /// Concatenates the `w` fused vectors of each channel and projects them to
    /// `w` predictions; `z: [B, N, w, d_v]` gives `[B, N, w]`.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let s = tape.shape(z).to_vec();
        if s.len() != 4 || s[2] != self.window || s[3] != self.d_k {
            return Err(DartsError::shape(format!(
                "fused features {s:?}, expected [B, N, {}, {}]",
                self.window, self.d_k
            )));
        }
        let flat = tape.reshape(z, &[s[0], s[1], self.window * self.d_k])?;
        let o = tape.matmul(flat, p.get(self.out_w))?;
        tape.add(o, p.get(self.out_b))
    }
}

/// `[B, L, N, d]` time-major to `[B * N, L, d]`.
fn channel_major(tape: &mut Tape, x: Var, bn: usize, len: usize, d: usize) -> Result<Var> {
    let y = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(y, &[bn, len, d])
}
