//! Long-term path: positional history encoding, window pooling, a decayed
//! temporal affinity graph and multi-scale propagation.

use rand::Rng;

use super::config::{ModelConfig, ScaleFusion};
use crate::autodiff::nn::{layer_norm, linear, standardize_axis, NormForm};
use crate::autodiff::params::xavier;
use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{DartsError, Result};

/// Sinusoidal table `[len, d]`: `sin(pos / 10000^(2i/d))` at even feature
/// `2i`, `cos` of the same angle at odd feature `2i + 1`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).unwrap()
}

/// `D[i][j] = decay^|i-j|`.
pub fn decay_matrix(t: usize, decay: f64) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..t {
            data[i * t + j] = decay.powi(i.abs_diff(j) as i32);
        }
    }
    Tensor::new(vec![t, t], data).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct AffinityGraph {
    /// `[B, T, T]` row-stochastic weights before decay.
    pub pre_decay: Var,
    /// `[B, T, T]` weights after the decay mask.
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct Lsgm {
    n: usize,
    d: usize,
    window: usize,
    history: usize,
    slope: f64,
    eps: f64,
    form: NormForm,
    fusion: ScaleFusion,
    lift_w: ParamId,
    lift_b: ParamId,
    proj: ParamId,
    thetas: Vec<(ParamId, ParamId)>,
    fuse: Option<(ParamId, ParamId)>,
    alpha: ParamId,
    beta: ParamId,
    pe: Tensor,
    pe_pooled: Tensor,
    decay: Tensor,
}

impl Lsgm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, n_channels: usize, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let t = cfg.n_context();
        let lift_w = store.add("lsgm.lift.weight", xavier(&[1, d], 1, d, rng));
        let lift_b = store.add("lsgm.lift.bias", Tensor::zeros(&[d]));
        let proj = store.add("lsgm.affinity.weight", xavier(&[d, d], d, d, rng));
        let thetas = (1..=cfg.receptive_fields)
            .map(|r| {
                (
                    store.add(format!("lsgm.scale{r}.weight"), xavier(&[d, d], d, d, rng)),
                    store.add(format!("lsgm.scale{r}.bias"), Tensor::zeros(&[d])),
                )
            })
            .collect();
        let fuse = match cfg.scale_fusion {
            ScaleFusion::Sum => None,
            ScaleFusion::Concat => {
                let k = cfg.receptive_fields * d;
                Some((
                    store.add("lsgm.fuse.weight", xavier(&[k, d], k, d, rng)),
                    store.add("lsgm.fuse.bias", Tensor::zeros(&[d])),
                ))
            }
        };
        let alpha = store.add("lsgm.norm.alpha", Tensor::ones(&[d]));
        let beta = store.add("lsgm.norm.beta", Tensor::zeros(&[d]));
        let pe = positional_encoding(cfg.history, d);
        let mut pooled = vec![0.0; t * d];
        for (pos, row) in pe.data().chunks(d).enumerate() {
            for (acc, v) in pooled[pos / cfg.window * d..].iter_mut().zip(row) {
                *acc += v / cfg.window as f64;
            }
        }
        Self {
            n: n_channels,
            d,
            window: cfg.window,
            history: cfg.history,
            slope: cfg.leaky_slope,
            eps: cfg.eps,
            form: cfg.norm_form(),
            fusion: cfg.scale_fusion,
            lift_w,
            lift_b,
            proj,
            thetas,
            fuse,
            alpha,
            beta,
            pe,
            pe_pooled: Tensor::new(vec![t, 1, d], pooled).unwrap(),
            decay: decay_matrix(t, cfg.decay),
        }
    }

    pub fn decay(&self) -> &Tensor {
        &self.decay
    }

    fn check_history(&self, tape: &Tape, x: Var) -> Result<(usize, usize)> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.n || s[2] != self.history {
            return Err(DartsError::shape(format!(
                "history batch {s:?}, expected [B, {}, {}]",
                self.n, self.history
            )));
        }
        Ok((s[0], self.history / self.window))
    }

    /// Lifted history with positional encoding, `[B, h, N, d]`.
    pub fn encode_history(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (b, _) = self.check_history(tape, x)?;
        let xt = tape.permute(x, &[0, 2, 1])?;
        let xt = tape.reshape(xt, &[b, self.history, self.n, 1])?;
        let y = tape.matmul(xt, p.get(self.lift_w))?;
        let y = tape.add(y, p.get(self.lift_b))?;
        let pe = tape.constant(self.pe.reshape(&[self.history, 1, self.d])?);
        tape.add(y, pe)
    }

    /// Same result as `pool_windows(encode_history(x))`, computed by pooling
    /// the scalar history first since lift and encoding are affine.
    pub fn encode_pooled(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let (b, t) = self.check_history(tape, x)?;
        let xw = tape.reshape(x, &[b, self.n, t, self.window])?;
        let m = tape.mean_axis(xw, 3)?;
        let m = tape.permute(m, &[0, 2, 1, 3])?;
        let y = tape.matmul(m, p.get(self.lift_w))?;
        let y = tape.add(y, p.get(self.lift_b))?;
        let pe = tape.constant(self.pe_pooled.clone());
        tape.add(y, pe)
    }

    /// Affinity over the `T` pooled windows of `s: [B, T, N, d]`.
    pub fn build_affinity(&self, tape: &mut Tape, p: &Bound, s: Var) -> Result<AffinityGraph> {
        let sh = tape.shape(s).to_vec();
        let (b, t) = (sh[0], sh[1]);
        if t < 2 {
            return Err(DartsError::DegenerateRow(format!(
                "temporal affinity needs at least 2 context windows, got {t}"
            )));
        }
        let nd = sh[2] * sh[3];
        let u = tape.matmul(s, p.get(self.proj))?;
        let u = tape.reshape(u, &[b, t, nd])?;
        let scores = tape.bmm(u, u, true)?;
        let scores = tape.mul_scalar(scores, 1.0 / (nd as f64).sqrt());
        let scores = tape.leaky_relu(scores, self.slope);
        let mask: Vec<bool> = (0..t * t).map(|k| k / t != k % t).collect();
        let pre_decay = tape.softmax(scores, Some(&mask))?;
        let d = tape.constant(self.decay.clone());
        let weights = tape.mul(pre_decay, d)?;
        Ok(AffinityGraph { pre_decay, weights })
    }

    /// Multi-scale propagation of the standardized pooled features along `T`,
    /// followed by the learned normalization; returns `[B, T, N, d]`.
    pub fn propagate(&self, tape: &mut Tape, p: &Bound, a: Var, s: Var) -> Result<Var> {
        let sh = tape.shape(s).to_vec();
        let (b, t) = (sh[0], sh[1]);
        let nd = sh[2] * sh[3];
        let normed = standardize_axis(tape, s, 1, self.eps)?;
        let mut cur = tape.reshape(normed, &[b, t, nd])?;
        let mut scales = Vec::with_capacity(self.thetas.len());
        for &(w, bias) in &self.thetas {
            cur = tape.bmm(a, cur, false)?;
            let x = tape.reshape(cur, &sh)?;
            scales.push(linear(tape, x, p.get(w), Some(p.get(bias)))?);
        }
        let fused = match (self.fusion, self.fuse) {
            (ScaleFusion::Concat, Some((w, bias))) => {
                let cat = tape.concat(&scales, 3)?;
                linear(tape, cat, p.get(w), Some(p.get(bias)))?
            }
            _ => {
                let mut acc = scales[0];
                for &x in &scales[1..] {
                    acc = tape.add(acc, x)?;
                }
                acc
            }
        };
        layer_norm(tape, fused, p.get(self.alpha), p.get(self.beta), self.eps, self.form)
    }

    /// Full long-term path from the raw history `[B, N, h]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, history: Var) -> Result<(Var, AffinityGraph)> {
        let s = self.encode_pooled(tape, p, history)?;
        let graph = self.build_affinity(tape, p, s)?;
        let out = self.propagate(tape, p, graph.weights, s)?;
        Ok((out, graph))
    }
}

/// Averages non-overlapping length-`w` segments of `x: [B, h, N, d]`; returns `[B, h / w, N, d]`.
pub fn pool_windows(tape: &mut Tape, x: Var, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || w == 0 || s[1] % w != 0 {
        return Err(DartsError::config(format!(
            "history of length {} is not a multiple of window {w}",
            s.get(1).copied().unwrap_or(0)
        )));
    }
    let t = s[1] / w;
    let xr = tape.reshape(x, &[s[0], t, w, s[2], s[3]])?;
    let m = tape.mean_axis(xr, 2)?;
    tape.reshape(m, &[s[0], t, s[2], s[3]])
}
