//! Short-term path: multi-view sparse graph learning over channels and
//! diffusion-convolutional gated recurrence along the current window.

use rand::Rng;

use super::config::{IsolatedNodes, ModelConfig};
use crate::autodiff::params::xavier;
use crate::autodiff::{gumbel_softmax_with_noise, one_hot_argmax, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{DartsError, Result};

const PROB_FLOOR: f64 = 1e-12;

/// How edges are drawn from the learned probabilities.
#[derive(Clone, Debug)]
pub enum Sampling {
    /// Deterministic: an edge exists where `p > 1 - p`.
    Argmax,
    /// Gumbel perturbation with the given `[B, H, N, N, 2]` noise.
    /// `hard` gives binary adjacencies with straight-through gradients.
    Gumbel { noise: Tensor, hard: bool },
}

impl Sampling {
    pub fn train<R: Rng + ?Sized>(batch: usize, heads: usize, n: usize, rng: &mut R) -> Self {
        Sampling::Gumbel {
            noise: crate::autodiff::gumbel_noise(&[batch, heads, n, n, 2], rng),
            hard: true,
        }
    }
}

/// Per-sample graphs of every head.
#[derive(Clone, Copy, Debug)]
pub struct SparseGraphSet {
    /// `[B, H, N, N]` edge probabilities with zero diagonal.
    pub probs: Var,
    /// `[B, H, N, N]` sampled adjacency.
    pub adjacency: Var,
    /// `[B, H, N, N, 2]` two-category samples (edge, no edge).
    pub samples: Var,
}

#[derive(Clone, Debug)]
struct Scorer {
    query: ParamId,
    key: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Cell {
    /// `[(orders) * d, 3d]`: input contributions to reset, update and candidate.
    w_x: ParamId,
    b: ParamId,
    /// `[(orders) * d, 2d]`
    w_h_gate: ParamId,
    /// `[(orders) * d, d]`
    w_h_cand: ParamId,
}

#[derive(Clone, Debug)]
pub struct Sarm {
    d: usize,
    n: usize,
    head_dim: usize,
    steps: usize,
    bidirectional: bool,
    isolated: IsolatedNodes,
    tau: f64,
    enc_w: ParamId,
    enc_b: ParamId,
    scorers: Vec<Scorer>,
    cells: Vec<Cell>,
    /// Off-diagonal mask, `[N, N]`.
    mask: Tensor,
}

impl Sarm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, n_channels: usize, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let hd = cfg.head_dim;
        let enc_w = store.add("sarm.encode.weight", xavier(&[1, d], 1, d, rng));
        let enc_b = store.add("sarm.encode.bias", Tensor::zeros(&[d]));
        let scorers = cfg
            .priors
            .iter()
            .enumerate()
            .map(|(h, &prior)| Scorer {
                query: store.add(format!("sarm.graph{h}.query"), xavier(&[d, hd], d, hd, rng)),
                key: store.add(format!("sarm.graph{h}.key"), xavier(&[d, hd], d, hd, rng)),
                // start every head at its prior edge density
                bias: store.add(format!("sarm.graph{h}.bias"), Tensor::full(&[1], (prior / (1.0 - prior)).ln())),
            })
            .collect();
        let orders = 1 + cfg.diffusion_steps * if cfg.bidirectional { 2 } else { 1 };
        let cells = (0..cfg.heads)
            .map(|h| {
                let mut bias = vec![1.0; 3 * d];
                bias[2 * d..].iter_mut().for_each(|b| *b = 0.0);
                Cell {
                    w_x: store.add(format!("sarm.cell{h}.w_x"), xavier(&[orders * d, 3 * d], orders * d, 3 * d, rng)),
                    b: store.add(format!("sarm.cell{h}.bias"), Tensor::new(vec![3 * d], bias).unwrap()),
                    w_h_gate: store.add(
                        format!("sarm.cell{h}.w_h_gate"),
                        xavier(&[orders * d, 2 * d], orders * d, 2 * d, rng),
                    ),
                    w_h_cand: store.add(
                        format!("sarm.cell{h}.w_h_cand"),
                        xavier(&[orders * d, d], orders * d, d, rng),
                    ),
                }
            })
            .collect();
        let mut mask = Tensor::ones(&[n_channels, n_channels]);
        for i in 0..n_channels {
            mask.set(&[i, i], 0.0);
        }
        Self {
            d,
            n: n_channels,
            head_dim: hd,
            steps: cfg.diffusion_steps,
            bidirectional: cfg.bidirectional,
            isolated: cfg.isolated_nodes,
            tau: cfg.tau,
            enc_w,
            enc_b,
            scorers,
            cells,
            mask,
        }
    }

    pub fn heads(&self) -> usize {
        self.cells.len()
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Lifts every observation of `x: [B, N, w]` to a `d`-vector; returns `[B, w, N, d]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.n {
            return Err(DartsError::shape(format!(
                "window batch {s:?} does not match {} channels",
                self.n
            )));
        }
        let (b, w) = (s[0], s[2]);
        let xt = tape.permute(x, &[0, 2, 1])?;
        let xt = tape.reshape(xt, &[b, w, self.n, 1])?;
        let y = tape.matmul(xt, p.get(self.enc_w))?;
        tape.add(y, p.get(self.enc_b))
    }

    /// Edge probabilities and sampled adjacencies for every head from `enc: [B, w, N, d]`.
    pub fn learn_graphs(&self, tape: &mut Tape, p: &Bound, enc: Var, sampling: &Sampling) -> Result<SparseGraphSet> {
        let b = tape.shape(enc)[0];
        let (n, h) = (self.n, self.heads());
        let pooled = tape.mean_axis(enc, 1)?;
        let nodes = tape.reshape(pooled, &[b, n, self.d])?;
        let mask = tape.constant(self.mask.clone());
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut per_head = Vec::with_capacity(h);
        for sc in &self.scorers {
            let q = tape.matmul(nodes, p.get(sc.query))?;
            let k = tape.matmul(nodes, p.get(sc.key))?;
            let s = tape.bmm(q, k, true)?;
            let s = tape.mul_scalar(s, scale);
            let s = tape.add(s, p.get(sc.bias))?;
            let prob = tape.sigmoid(s);
            per_head.push(tape.mul(prob, mask)?);
        }
        let probs = tape.stack(&per_head, 1)?;

        let pc = tape.clamp(probs, PROB_FLOOR, 1.0 - PROB_FLOOR);
        let qc = tape.rsub_scalar(1.0, probs);
        let qc = tape.clamp(qc, PROB_FLOOR, 1.0 - PROB_FLOOR);
        let lp = tape.log(pc)?;
        let lq = tape.log(qc)?;
        let logits = tape.stack(&[lp, lq], 4)?;
        let samples = match sampling {
            Sampling::Argmax => {
                let hard = one_hot_argmax(tape.value(logits));
                tape.constant(hard)
            }
            Sampling::Gumbel { noise, hard } => {
                if noise.shape() != [b, h, n, n, 2] {
                    return Err(DartsError::shape(format!(
                        "gumbel noise {:?}, expected {:?}",
                        noise.shape(),
                        [b, h, n, n, 2]
                    )));
                }
                gumbel_softmax_with_noise(tape, logits, noise.clone(), self.tau, *hard)?
            }
        };
        let edge = tape.select(samples, 4, 0)?;
        let adjacency = tape.mul(edge, mask)?;
        Ok(SparseGraphSet {
            probs,
            adjacency,
            samples,
        })
    }

    /// Runs every head's diffusion GRU over `enc: [B, w, N, d]` and averages
    /// the hidden sequences over heads; returns `[B, w, N, d]`.
    pub fn diffuse(&self, tape: &mut Tape, p: &Bound, enc: Var, graphs: &SparseGraphSet) -> Result<Var> {
        let s = tape.shape(enc).to_vec();
        let (b, w, n, d) = (s[0], s[1], s[2], s[3]);
        // node-major view of the whole window for batched diffusion of the inputs
        let xn = tape.permute(enc, &[0, 2, 1, 3])?;
        let xn = tape.reshape(xn, &[b, n, w * d])?;
        self.run_heads(tape, p, graphs, b, w, |tape, cell, supports| {
            let orders = 1 + supports.len() * self.steps;
            let xs = self.diffusion_stack(tape, supports, xn)?;
            let xs = tape.reshape(xs, &[b, n, orders, w, d])?;
            let xs = tape.permute(xs, &[0, 3, 1, 2, 4])?;
            let xs = tape.reshape(xs, &[b, w, n, orders * d])?;
            tape.matmul(xs, p.get(cell.w_x))
        })
    }

    /// Same result as `diffuse(encode(x))` for the raw window `x: [B, N, w]`.
    /// Since the encoder is affine, diffusion acts on the scalar series and a
    /// constant channel, and the encoder folds into the input weights.
    pub fn diffuse_raw(&self, tape: &mut Tape, p: &Bound, x: Var, graphs: &SparseGraphSet) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, n, w) = (s[0], s[1], s[2]);
        let d = self.d;
        let x4 = tape.reshape(x, &[b, n, w, 1])?;
        let ones = tape.constant(Tensor::ones(&[b, n, w, 1]));
        let xn = tape.concat(&[x4, ones], 3)?;
        let xn = tape.reshape(xn, &[b, n, w * 2])?;
        let enc_w = p.get(self.enc_w);
        let enc_b = tape.reshape(p.get(self.enc_b), &[1, d])?;
        self.run_heads(tape, p, graphs, b, w, |tape, cell, supports| {
            let orders = 1 + supports.len() * self.steps;
            let xs = self.diffusion_stack(tape, supports, xn)?;
            let xs = tape.reshape(xs, &[b, n, orders, w, 2])?;
            let xs = tape.permute(xs, &[0, 3, 1, 2, 4])?;
            let xs = tape.reshape(xs, &[b, w, n, orders * 2])?;
            let mut rows = Vec::with_capacity(2 * orders);
            for k in 0..orders {
                let wk = tape.narrow(p.get(cell.w_x), 0, k * d, d)?;
                rows.push(tape.matmul(enc_w, wk)?);
                rows.push(tape.matmul(enc_b, wk)?);
            }
            let folded = tape.concat(&rows, 0)?;
            tape.matmul(xs, folded)
        })
    }

    /// Shared recurrence; `input` yields each head's `[B, w, N, 3d]` input contributions.
    fn run_heads(
        &self,
        tape: &mut Tape,
        p: &Bound,
        graphs: &SparseGraphSet,
        b: usize,
        w: usize,
        mut input: impl FnMut(&mut Tape, &Cell, &[Var]) -> Result<Var>,
    ) -> Result<Var> {
        let (n, d) = (self.n, self.d);
        let gh = tape.shape(graphs.adjacency)[1];
        if gh != self.heads() {
            return Err(DartsError::shape(format!(
                "{gh} graphs for {} diffusion heads",
                self.heads()
            )));
        }
        let mut outputs = Vec::with_capacity(gh);
        for (hi, cell) in self.cells.iter().enumerate() {
            let a = tape.select(graphs.adjacency, 1, hi)?;
            let supports = self.supports(tape, a)?;
            let xg = input(tape, cell, &supports)?;
            let xg = tape.add(xg, p.get(cell.b))?;

            let mut hstate = tape.constant(Tensor::zeros(&[b, n, d]));
            let mut seq = Vec::with_capacity(w);
            for t in 0..w {
                let xt = tape.select(xg, 1, t)?;
                let x_gate = tape.narrow(xt, 2, 0, 2 * d)?;
                let x_cand = tape.narrow(xt, 2, 2 * d, d)?;
                let hs = self.diffusion_stack(tape, &supports, hstate)?;
                let g = tape.matmul(hs, p.get(cell.w_h_gate))?;
                let g = tape.add(g, x_gate)?;
                let g = tape.sigmoid(g);
                let r = tape.narrow(g, 2, 0, d)?;
                let u = tape.narrow(g, 2, d, d)?;
                let rh = tape.mul(r, hstate)?;
                let cs = self.diffusion_stack(tape, &supports, rh)?;
                let c = tape.matmul(cs, p.get(cell.w_h_cand))?;
                let c = tape.add(c, x_cand)?;
                let c = tape.tanh(c);
                let diff = tape.sub(hstate, c)?;
                let keep = tape.mul(u, diff)?;
                hstate = tape.add(c, keep)?;
                seq.push(hstate);
            }
            outputs.push(tape.stack(&seq, 1)?);
        }
        let mut total = outputs[0];
        for &o in &outputs[1..] {
            total = tape.add(total, o)?;
        }
        Ok(tape.mul_scalar(total, 1.0 / gh as f64))
    }

    /// Transition matrices derived from one head's `[B, N, N]` adjacency.
    fn supports(&self, tape: &mut Tape, a: Var) -> Result<Vec<Var>> {
        let mut out = vec![row_normalize(tape, a, self.isolated)?];
        if self.bidirectional {
            let at = tape.permute(a, &[0, 2, 1])?;
            out.push(row_normalize(tape, at, self.isolated)?);
        }
        Ok(out)
    }

    /// `[z, P z, P^2 z, ...]` for each support, concatenated on the last axis.
    fn diffusion_stack(&self, tape: &mut Tape, supports: &[Var], z: Var) -> Result<Var> {
        let mut terms = vec![z];
        for &s in supports {
            let mut cur = z;
            for _ in 0..self.steps {
                cur = tape.bmm(s, cur, false)?;
                terms.push(cur);
            }
        }
        tape.concat(&terms, 2)
    }
}

/// Random-walk normalization of `[B, N, N]` adjacencies. Rows without edges
/// become unit self-loops under [`IsolatedNodes::Identity`].
pub fn row_normalize(tape: &mut Tape, a: Var, isolated: IsolatedNodes) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    let n = s[1];
    let deg = tape.sum_axis(a, 2)?;
    let is_isolated = tape.value(deg).map(|v| if v == 0.0 { 1.0 } else { 0.0 });
    let fill = tape.constant(is_isolated.clone());
    let denom = tape.add(deg, fill)?;
    let p = tape.div(a, denom)?;
    match isolated {
        IsolatedNodes::Zero => Ok(p),
        IsolatedNodes::Identity => {
            let mut eye = Tensor::zeros(&s);
            {
                let iso = is_isolated.data();
                let data = eye.data_mut();
                for bi in 0..s[0] {
                    for i in 0..n {
                        if iso[bi * n + i] == 1.0 {
                            data[(bi * n + i) * n + i] = 1.0;
                        }
                    }
                }
            }
            let eye = tape.constant(eye);
            tape.add(p, eye)
        }
    }
}
