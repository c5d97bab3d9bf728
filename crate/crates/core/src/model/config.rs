use serde::{Deserialize, Serialize};

use crate::autodiff::nn::NormForm;
use crate::data::WindowLayout;
use crate::error::{DartsError, Result};

/// How diffusion treats a node without outgoing edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolatedNodes {
    /// The row of the transition matrix becomes a unit self-loop.
    #[default]
    Identity,
    /// The row stays zero, so higher diffusion orders vanish for that node.
    Zero,
}

/// Combination of the per-scale outputs of the long-term path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFusion {
    #[default]
    Sum,
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// Full Bernoulli divergence per edge.
    #[default]
    Bernoulli,
    /// Only the `p log(p / prior)` term.
    OneSided,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    /// Fusion attends from the short-term tokens to themselves.
    pub disable_lsgm: bool,
    /// Fusion uses `(T1 + mean_T T2) Wv` instead of attention.
    pub disable_fusion_attention: bool,
    pub kl_form: KlForm,
    /// Use the literal normalization formula in the long-term path.
    pub literal_layer_norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window: usize,
    pub history: usize,
    pub stride: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Per-head Bernoulli edge priors.
    pub priors: Vec<f64>,
    pub tau: f64,
    pub diffusion_steps: usize,
    pub bidirectional: bool,
    pub isolated_nodes: IsolatedNodes,
    pub receptive_fields: usize,
    pub decay: f64,
    pub scale_fusion: ScaleFusion,
    /// Key/value width of the fusion attention; `None` means `d_model`.
    pub d_k: Option<usize>,
    pub leaky_slope: f64,
    pub eps: f64,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            window: 30,
            history: 300,
            stride: 5,
            d_model: 64,
            heads: 3,
            head_dim: 64,
            priors: vec![0.9, 0.05, 0.05],
            tau: 0.5,
            diffusion_steps: 2,
            bidirectional: false,
            isolated_nodes: IsolatedNodes::Identity,
            receptive_fields: 2,
            decay: 0.7,
            scale_fusion: ScaleFusion::Sum,
            d_k: None,
            leaky_slope: 0.01,
            eps: 1e-6,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn layout(&self) -> WindowLayout {
        WindowLayout {
            window: self.window,
            history: self.history,
            stride: self.stride,
        }
    }

    pub fn n_context(&self) -> usize {
        self.history / self.window
    }

    pub fn d_k(&self) -> usize {
        self.d_k.unwrap_or(self.d_model)
    }

    pub fn norm_form(&self) -> NormForm {
        if self.ablations.literal_layer_norm {
            NormForm::Literal
        } else {
            NormForm::Standard
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().validate()?;
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("receptive_fields", self.receptive_fields),
            ("d_k", self.d_k()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DartsError::config(format!("{name} must be positive")));
            }
        }
        if self.priors.len() != self.heads {
            return Err(DartsError::config(format!(
                "{} priors given for {} heads",
                self.priors.len(),
                self.heads
            )));
        }
        if let Some(p) = self.priors.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(DartsError::Parameter(format!("edge prior {p} outside (0, 1)")));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(DartsError::Parameter(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(DartsError::Parameter(format!("decay {} outside [0, 1]", self.decay)));
        }
        if !(self.eps > 0.0) {
            return Err(DartsError::Parameter("eps must be positive".into()));
        }
        if !self.ablations.disable_lsgm && self.n_context() < 2 {
            return Err(DartsError::config(
                "history must span at least two windows for the temporal affinity graph",
            ));
        }
        Ok(())
    }
}
