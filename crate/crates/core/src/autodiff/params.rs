use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::Graph;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a [`Parameter`] inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What the optimizer is allowed to do with a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, with L2 weight decay.
    Weight,
    /// Trainable, exempt from weight decay (normalization affine terms, fusion scalars).
    NoDecay,
    /// Not trainable; updated outside the optimizer (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

impl Parameter {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn weight_decay_exempt(&self) -> bool {
        self.kind != ParamKind::Weight
    }
}

/// Ordered, name-addressable collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

/// Running-statistics update emitted by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            kind,
        });
        Ok(id)
    }

    /// Adds a weight drawn from `N(0, std²)`.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let value = if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            Tensor::from_fn(shape, |_| normal.sample(rng))
        } else {
            Tensor::zeros(shape)
        };
        self.add(name, value, ParamKind::Weight)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients that `graph.backward` left on parameter leaves.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, var) in graph.param_vars() {
            if let Some(g) = graph.grad(var) {
                let dst = self.params[id.0].grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }

    /// Folds the batch statistics recorded in `graph` into the running buffers.
    pub fn apply_bn_updates(&mut self, graph: &Graph, momentum: f64) {
        for up in graph.bn_updates() {
            let mean = self.params[up.running_mean.0].value.data_mut();
            for (m, b) in mean.iter_mut().zip(&up.batch_mean) {
                *m = (1.0 - momentum) * *m + momentum * b;
            }
            let var = self.params[up.running_var.0].value.data_mut();
            for (v, b) in var.iter_mut().zip(&up.batch_var) {
                *v = (1.0 - momentum) * *v + momentum * b;
            }
        }
    }

    /// Rounds every stored value to the nearest `f32`, so that single-precision
    /// checkpoints capture the state exactly.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            round_slice_to_f32(p.value.data_mut());
        }
    }

    /// Copies values (not gradients) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::shape("parameter stores differ in length"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}

pub(crate) fn round_slice_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
