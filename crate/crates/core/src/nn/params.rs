use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Mark embedding table.
    Embedding,
    /// SIREN kernel weights (θ).
    Kernel,
    /// Channel aggregation and layer normalization of the local encoder (W^O).
    Aggregation,
    /// Recurrent global encoder (γ).
    Gru,
    /// Distribution decoder (Φ).
    DistDecoder,
    /// Prediction decoder (Ξ).
    PredDecoder,
    /// Anything registered outside the model, e.g. in tests.
    Other,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Kernel => "kernel",
            ParamGroup::Aggregation => "aggregation",
            ParamGroup::Gru => "gru",
            ParamGroup::DistDecoder => "dist_decoder",
            ParamGroup::PredDecoder => "pred_decoder",
            ParamGroup::Other => "other",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "embedding" => ParamGroup::Embedding,
            "kernel" => ParamGroup::Kernel,
            "aggregation" => ParamGroup::Aggregation,
            "gru" => ParamGroup::Gru,
            "dist_decoder" => ParamGroup::DistDecoder,
            "pred_decoder" => ParamGroup::PredDecoder,
            "other" => ParamGroup::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// Same shape as `value` whenever present.
    pub grad: Option<Tensor>,
}

/// Named trainable arrays with gradient buffers, kept in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Argument(format!("parameter `{name}` registered twice")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    /// Registers a `rows × cols` weight drawn from `uniform(-bound, bound)`.
    pub fn register_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.register(name, group, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` is {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            let (r, c) = p.value.shape();
            p.grad = Some(Tensor::zeros(r, c));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's buffer, creating it if needed.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{}` is {:?}, parameter is {:?}",
                p.name,
                grad.shape(),
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Euclidean norm over every populated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let c = max_norm / norm;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.scale_mut(c);
            }
        }
        norm
    }
}
