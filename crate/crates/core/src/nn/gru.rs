use rand::Rng;

use super::{default_init_bound, linear, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Gated recurrent unit with the reset gate applied to the previous state
/// inside the candidate:
///
/// ```text
/// z = σ([x; h]·W_z + b_z)
/// r = σ([x; h]·W_r + b_r)
/// ĥ = tanh([x; r⊙h]·W_h + b_h)
/// h' = (1 - z)⊙h + z⊙ĥ
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    /// Registers the cell's parameters under `prefix`. Weights are drawn from
    /// `uniform(±1/√fan_in)`, biases start at zero.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden_dim == 0 {
            return Err(Error::Argument("GRU hidden size must be at least 1".into()));
        }
        let fan_in = input_dim + hidden_dim;
        let bound = default_init_bound(fan_in);
        let weight = |store: &mut ParamStore, name: &str, rng: &mut R| {
            store.register_uniform(format!("{prefix}.{name}"), group, fan_in, hidden_dim, bound, rng)
        };
        let w_z = weight(store, "w_z", rng)?;
        let w_r = weight(store, "w_r", rng)?;
        let w_h = weight(store, "w_h", rng)?;
        let mut bias = |name: &str| store.register(format!("{prefix}.{name}"), group, Tensor::zeros(1, hidden_dim));
        let b_z = bias("b_z")?;
        let b_r = bias("b_r")?;
        let b_h = bias("b_h")?;
        Ok(GruCell {
            input_dim,
            hidden_dim,
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [self.w_z, self.b_z, self.w_r, self.b_r, self.w_h, self.b_h]
    }

    /// One step for a batch: `h_prev` is `B × d_h`, `x` is `B × d_in`.
    pub fn step(&self, g: &Graph, store: &ParamStore, h_prev: Var, x: Var) -> Result<Var> {
        let (hr, hc) = g.value(h_prev).shape();
        let (xr, xc) = g.value(x).shape();
        if hc != self.hidden_dim || xc != self.input_dim || hr != xr {
            return Err(Error::Shape(format!(
                "GRU({}→{}) given x {xr}x{xc}, h {hr}x{hc}",
                self.input_dim, self.hidden_dim
            )));
        }
        let p = |id| g.param(store, id);
        let xh = g.concat_cols(&[x, h_prev])?;
        let z = g.sigmoid(linear(g, xh, p(self.w_z), Some(p(self.b_z)))?);
        let r = g.sigmoid(linear(g, xh, p(self.w_r), Some(p(self.b_r)))?);
        let rh = g.mul(r, h_prev)?;
        let xrh = g.concat_cols(&[x, rh])?;
        let cand = g.tanh(linear(g, xrh, p(self.w_h), Some(p(self.b_h)))?);
        // (1 - z)⊙h + z⊙ĥ = h + z⊙(ĥ - h)
        let delta = g.sub(cand, h_prev)?;
        g.add(h_prev, g.mul(z, delta)?)
    }
}
