//! Minimal differentiable numeric core: tensors, a reverse-mode tape,
//! parameter storage, primitive layers, a GRU cell, Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod graph;
mod gru;
mod params;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{analytic_gradients, compare_gradients, grad_check, numeric_gradients, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{logsumexp, Gradients, Graph, PairMode, Var};
pub use gru::GruCell;
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// `y = x·W + b` for a batch of row vectors.
pub fn linear(g: &Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Bound of the default uniform initializer for a layer with `fan_in` inputs.
pub fn default_init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
