//! Named parameter storage and initialization.

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{DartsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Order is the registration order and
/// is also the on-disk order in checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "parameter {name} registered twice"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces values with those of `other`, which must have the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(DartsError::Compatibility(
                "parameter manifests differ".into(),
            ));
        }
        for (name, (dst, src)) in self.names.iter().zip(self.values.iter_mut().zip(&other.values)) {
            if dst.shape() != src.shape() {
                return Err(DartsError::Compatibility(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Places every parameter on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters as they appear on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients aligned with the store order; constants yield zeros.
    pub fn collect(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.values())
            .map(|(&v, value)| grads.take(v).unwrap_or_else(|| Tensor::zeros(value.shape())))
            .collect()
    }
}

/// Glorot-uniform initialization.
pub fn xavier<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
