//! Continuous convolution kernels ψ(τ) represented by sinusoidal MLPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear, Graph, PairMode, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Shape of a kernel's output at one offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// A `d × d` matrix applied to the source embedding.
    #[default]
    Full,
    /// A length-`d` vector multiplied elementwise with the source embedding.
    Depthwise,
}

impl KernelMode {
    pub fn output_width(self, d: usize) -> usize {
        match self {
            KernelMode::Full => d * d,
            KernelMode::Depthwise => d,
        }
    }

    pub fn pair_mode(self) -> PairMode {
        match self {
            KernelMode::Full => PairMode::Full,
            KernelMode::Depthwise => PairMode::Depthwise,
        }
    }
}

/// Hidden layers compute `sin(ω₀(xW + b))`; the last layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenKernel {
    pub omega0: f64,
    pub dim: usize,
    pub mode: KernelMode,
    /// `(weight, bias)` per layer, input first. The last entry is the output layer.
    pub layers: Vec<(ParamId, ParamId)>,
}

impl SirenKernel {
    /// Registers a kernel named `{prefix}.{k}.weight` / `{prefix}.{k}.bias`.
    ///
    /// Initialization: first layer `uniform(±1/fan_in)`, later hidden layers
    /// `uniform(±√(6/fan_in)/ω₀)`, output layer `uniform(±1/fan_in)`. Biases
    /// share their layer's bound.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        mode: KernelMode,
        hidden: &[usize],
        omega0: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Argument(format!(
                "kernel needs at least one non-empty hidden layer, got {hidden:?}"
            )));
        }
        if !(omega0 > 0.0 && omega0.is_finite()) {
            return Err(Error::Argument(format!("omega0 must be positive, got {omega0}")));
        }
        if dim == 0 {
            return Err(Error::Argument("kernel dimension must be at least 1".into()));
        }
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(mode.output_width(dim));
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for k in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[k], widths[k + 1]);
            let bound = if k == 0 || k == widths.len() - 2 {
                1.0 / fan_in as f64
            } else {
                (6.0 / fan_in as f64).sqrt() / omega0
            };
            let w = store.register_uniform(format!("{prefix}.{k}.weight"), ParamGroup::Kernel, fan_in, fan_out, bound, rng)?;
            let b = store.register_uniform(format!("{prefix}.{k}.bias"), ParamGroup::Kernel, 1, fan_out, bound, rng)?;
            layers.push((w, b));
        }
        Ok(SirenKernel { omega0, dim, mode, layers })
    }

    pub fn output_width(&self) -> usize {
        self.mode.output_width(self.dim)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Evaluates the kernel at a `P × 1` column of offsets; returns `P × width`.
    pub fn eval(&self, g: &Graph, store: &ParamStore, taus: Var) -> Result<Var> {
        let mut x = taus;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let y = linear(g, x, g.param(store, w), Some(g.param(store, b)))?;
            x = if k < last { g.sin(g.scale(y, self.omega0)) } else { y };
        }
        Ok(x)
    }

    /// ψ(τ) as a `d × d` matrix (full) or `1 × d` row (depthwise).
    pub fn eval_at(&self, store: &ParamStore, tau: f64) -> Result<Tensor> {
        if !tau.is_finite() {
            return Err(Error::Argument(format!("kernel offset must be finite, got {tau}")));
        }
        let g = Graph::new();
        let out = self.eval(&g, store, g.constant(Tensor::scalar(tau)))?;
        let row = g.value(out).data().to_vec();
        match self.mode {
            KernelMode::Full => Tensor::from_vec(self.dim, self.dim, row),
            KernelMode::Depthwise => Tensor::from_vec(1, self.dim, row),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn scalar_sine(omega0: f64) -> (ParamStore, SirenKernel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = SirenKernel::register(&mut store, "k", 1, KernelMode::Depthwise, &[1], omega0, &mut rng).unwrap();
        for (w, b) in &k.layers {
            store.set(*w, Tensor::scalar(1.0)).unwrap();
            store.set(*b, Tensor::scalar(0.0)).unwrap();
        }
        (store, k)
    }

    fn random(seed: u64, mode: KernelMode, omega0: f64) -> (ParamStore, SirenKernel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = SirenKernel::register(&mut store, "k", 3, mode, &[8, 8, 8], omega0, &mut rng).unwrap();
        (store, k)
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let (mut store, k) = random(1, KernelMode::Full, 30.0);
        let (w, b) = *k.layers.last().unwrap();
        store.set(w, Tensor::zeros(8, 9)).unwrap();
        store.set(b, Tensor::zeros(1, 9)).unwrap();
        for tau in [0.0, 0.3, 7.0, 1e4] {
            assert_eq!(k.eval_at(&store, tau).unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn closed_form_sine() {
        let (store, k) = scalar_sine(1.0);
        assert!((k.eval_at(&store, FRAC_PI_2).unwrap().item() - 1.0).abs() < 1e-15);
        for tau in [0.0, 0.1, 1.0, 2.5] {
            assert!((k.eval_at(&store, tau).unwrap().item() - tau.sin()).abs() < 1e-15);
        }
        let (store, k) = scalar_sine(2.0);
        assert!(k.eval_at(&store, FRAC_PI_2).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn omega_only_scales_hidden_preactivations() {
        let (store, k) = random(2, KernelMode::Full, 3.0);
        let mut halved = store.clone();
        for &(w, b) in &k.layers[..k.layers.len() - 1] {
            for id in [w, b] {
                let v = store.value(id).map(|x| x * 0.5);
                halved.set(id, v).unwrap();
            }
        }
        let doubled = SirenKernel { omega0: 6.0, ..k.clone() };
        for tau in [0.0, 0.25, 1.0, 3.7] {
            let a = k.eval_at(&store, tau).unwrap();
            let b = doubled.eval_at(&halved, tau).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-14, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn continuity() {
        let (store, k) = random(3, KernelMode::Depthwise, 30.0);
        for tau in [0.0, 0.5, 2.0] {
            let at = |t| k.eval_at(&store, t).unwrap();
            let base = at(tau);
            let lip = at(tau + 1e-4)
                .data()
                .iter()
                .zip(base.data())
                .map(|(a, b)| (a - b).abs() / 1e-4)
                .fold(0.0, f64::max);
            let tiny = at(tau + 1e-8);
            for (a, b) in tiny.data().iter().zip(base.data()) {
                assert!((a - b).abs() <= 2.0 * lip * 1e-8 + 1e-14);
            }
        }
    }

    #[test]
    fn output_shapes() {
        let (store, k) = random(4, KernelMode::Full, 1.0);
        assert_eq!(k.eval_at(&store, 1.0).unwrap().shape(), (3, 3));
        let (store, k) = random(4, KernelMode::Depthwise, 1.0);
        assert_eq!(k.eval_at(&store, 1.0).unwrap().shape(), (1, 3));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (store, k) = random(5, KernelMode::Full, 1.0);
        assert!(matches!(k.eval_at(&store, f64::NAN), Err(Error::Argument(_))));
        assert!(matches!(k.eval_at(&store, f64::INFINITY), Err(Error::Argument(_))));
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SirenKernel::register(&mut s, "a", 2, KernelMode::Full, &[], 1.0, &mut rng).is_err());
        assert!(SirenKernel::register(&mut s, "b", 2, KernelMode::Full, &[4], 0.0, &mut rng).is_err());
    }

    #[test]
    fn initialization_bounds() {
        let (store, k) = random(6, KernelMode::Full, 30.0);
        let bound = |i: usize| store.value(k.layers[i].0).max_abs();
        assert!(bound(0) <= 1.0);
        assert!(bound(1) <= (6.0f64 / 8.0).sqrt() / 30.0);
        assert!(bound(3) <= 1.0 / 8.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, mode) in [(7, KernelMode::Full), (8, KernelMode::Depthwise)] {
            let (mut store, k) = random(seed, mode, 1.5);
            let taus = Tensor::column(&[0.0, 0.4, 1.3, 2.2]);
            let report = grad_check(&mut store, 1e-5, |g, s| {
                let out = k.eval(g, s, g.constant(taus.clone()))?;
                Ok(g.sum(g.sin(out)))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }
}
