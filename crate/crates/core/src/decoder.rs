//! Next-event decoders.
//!
//! [`DistDecoder`] gives a categorical mark distribution and a log-normal
//! mixture over the next interval. [`PredDecoder`] emits a point prediction
//! for both.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::nn::{default_init_bound, linear, logsumexp, Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::synth::rng_for;

/// Bounds applied to the log-scale head before exponentiation.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;
/// Intervals are floored at this value before taking logarithms.
pub const MIN_INTERVAL: f64 = 1e-8;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn register_weight<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<ParamId> {
    store.register_uniform(name, group, rows, cols, default_init_bound(rows), rng)
}

/// `logits = h·W_π (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkHead {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub num_marks: usize,
}

impl MarkHead {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        hidden: usize,
        num_marks: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_marks == 0 {
            return Err(Error::Argument("at least one mark is required".into()));
        }
        let weight = register_weight(store, format!("{prefix}.mark.weight"), group, hidden, num_marks, rng)?;
        let bias = if with_bias {
            Some(store.register(format!("{prefix}.mark.bias"), group, Tensor::zeros(1, num_marks))?)
        } else {
            None
        };
        Ok(MarkHead { weight, bias, num_marks })
    }

    pub fn logits(&self, g: &Graph, store: &ParamStore, h: Var) -> Result<Var> {
        linear(g, h, g.param(store, self.weight), self.bias.map(|b| g.param(store, b)))
    }

    pub fn log_probs(&self, g: &Graph, store: &ParamStore, h: Var) -> Result<Var> {
        Ok(g.log_softmax(self.logits(g, store, h)?))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Mixture heads on the graph, one row per hidden state.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub log_weights: Var,
    /// Already clamped.
    pub log_sigmas: Var,
    pub mus: Var,
}

/// Parameters `{W_π, W_w, b_w, W_s, b_s, W_μ, b_μ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistDecoder {
    pub mark: MarkHead,
    pub w_w: ParamId,
    pub b_w: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub components: usize,
}

impl DistDecoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        num_marks: usize,
        components: usize,
        mark_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if components == 0 {
            return Err(Error::Argument("mixture needs at least one component".into()));
        }
        let group = ParamGroup::DistDecoder;
        let mark = MarkHead::register(store, "dist", group, hidden, num_marks, mark_bias, rng)?;
        let mut head = |name: &str, rng: &mut R| -> Result<(ParamId, ParamId)> {
            let w = register_weight(store, format!("dist.{name}.weight"), group, hidden, components, rng)?;
            let b = store.register(format!("dist.{name}.bias"), group, Tensor::zeros(1, components))?;
            Ok((w, b))
        };
        let (w_w, b_w) = head("w", rng)?;
        let (w_s, b_s) = head("s", rng)?;
        let (w_mu, b_mu) = head("mu", rng)?;
        Ok(DistDecoder {
            mark,
            w_w,
            b_w,
            w_s,
            b_s,
            w_mu,
            b_mu,
            components,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.mark.param_ids();
        ids.extend([self.w_w, self.b_w, self.w_s, self.b_s, self.w_mu, self.b_mu]);
        ids
    }

    pub fn mixture(&self, g: &Graph, store: &ParamStore, h: Var) -> Result<MixtureVars> {
        let p = |id| g.param(store, id);
        let log_weights = g.log_softmax(linear(g, h, p(self.w_w), Some(p(self.b_w)))?);
        let raw = linear(g, h, p(self.w_s), Some(p(self.b_s)))?;
        let log_sigmas = g.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        let mus = linear(g, h, p(self.w_mu), Some(p(self.b_mu)))?;
        Ok(MixtureVars {
            log_weights,
            log_sigmas,
            mus,
        })
    }

    /// Plain-valued mixture for a single hidden state.
    pub fn mixture_params(&self, store: &ParamStore, h: &[f64]) -> Result<MixtureParams> {
        let g = Graph::new();
        let m = self.mixture(&g, store, g.constant(Tensor::row_vector(h)))?;
        MixtureParams::new(
            g.value(m.log_weights).data().iter().map(|v| v.exp()).collect(),
            g.value(m.log_sigmas).data().iter().map(|v| v.exp()).collect(),
            g.value(m.mus).data().to_vec(),
        )
    }

    pub fn mark_log_probs(&self, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
        mark_log_probs(&self.mark, store, h)
    }

    /// Draws `(mark, time)` for the event after one at `t_last`.
    pub fn sample_next_with<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        h: &[f64],
        t_last: f64,
        rng: &mut R,
    ) -> Result<(usize, f64)> {
        let logp = self.mark_log_probs(store, h)?;
        let mark = WeightedIndex::new(logp.iter().map(|v| v.exp()))
            .map_err(|e| Error::NonFinite(format!("mark probabilities: {e}")))?
            .sample(rng);
        let mix = self.mixture_params(store, h)?;
        Ok((mark, t_last + mix.sample_interval(rng)?))
    }

    pub fn sample_next(&self, store: &ParamStore, h: &[f64], t_last: f64, seed: u64) -> Result<(usize, f64)> {
        self.sample_next_with(store, h, t_last, &mut rng_for(seed))
    }
}

/// `log Σ_k w_k · LogNormal(τ; μ_k, σ_k)` for each row, given a `T × 1`
/// column of `ln τ`. Returns `T × 1`.
pub fn mixture_log_density(g: &Graph, m: MixtureVars, log_tau: Var) -> Result<Var> {
    let centered = g.add_col(g.scale(m.mus, -1.0), log_tau)?;
    let z = g.mul(centered, g.exp(g.scale(m.log_sigmas, -1.0)))?;
    let comp = g.sub(m.log_weights, m.log_sigmas)?;
    let comp = g.sub(comp, g.scale(g.square(z), 0.5))?;
    let offset = g.scale(g.add_scalar(log_tau, HALF_LN_2PI), -1.0);
    let comp = g.add_col(comp, offset)?;
    Ok(g.logsumexp(comp))
}

/// Weights, scales and locations of a log-normal mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub mus: Vec<f64>,
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, sigmas: Vec<f64>, mus: Vec<f64>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || sigmas.len() != m || mus.len() != m {
            return Err(Error::Shape(format!(
                "mixture with {m} weights, {} scales, {} locations",
                sigmas.len(),
                mus.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!("mixture weights sum to {total}")));
        }
        if sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) || mus.iter().any(|m| !m.is_finite()) {
            return Err(Error::Argument("mixture scales must be positive and locations finite".into()));
        }
        Ok(MixtureParams { weights, sigmas, mus })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Draws `exp(r)` with `z ~ Categorical(w)`, `r ~ Normal(μ_z, σ_z)`.
    pub fn sample_interval<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let z = WeightedIndex::new(&self.weights)
            .map_err(|e| Error::Argument(format!("mixture weights: {e}")))?
            .sample(rng);
        let normal = Normal::new(self.mus[z], self.sigmas[z]).map_err(|e| Error::Argument(e.to_string()))?;
        Ok(normal.sample(rng).exp())
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.sigmas)
            .zip(&self.mus)
            .map(|((w, s), m)| w * (m + 0.5 * s * s).exp())
            .sum()
    }
}

/// Log density of the mixture at `tau > 0`.
pub fn lognormmix_logpdf(tau: f64, p: &MixtureParams) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("log-normal density needs a positive interval, got {tau}")));
    }
    let lt = tau.ln();
    let terms: Vec<f64> = p
        .weights
        .iter()
        .zip(&p.sigmas)
        .zip(&p.mus)
        .map(|((w, s), m)| {
            let z = (lt - m) / s;
            w.ln() - s.ln() - lt - HALF_LN_2PI - 0.5 * z * z
        })
        .collect();
    Ok(logsumexp(&terms))
}

/// `log_softmax(h·W_π (+ b))` for one hidden state.
pub fn mark_log_probs(head: &MarkHead, store: &ParamStore, h: &[f64]) -> Result<Vec<f64>> {
    let g = Graph::new();
    let lp = head.log_probs(&g, store, g.constant(Tensor::row_vector(h)))?;
    let out = g.value(lp).data().to_vec();
    Ok(out)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = k;
        }
    }
    best
}

/// Parameters `{W_π, W_t, b_t}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredDecoder {
    pub mark: MarkHead,
    pub w_t: ParamId,
    pub b_t: ParamId,
}

impl PredDecoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        hidden: usize,
        num_marks: usize,
        mark_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let group = ParamGroup::PredDecoder;
        let mark = MarkHead::register(store, "pred", group, hidden, num_marks, mark_bias, rng)?;
        let w_t = register_weight(store, "pred.time.weight".into(), group, hidden, 1, rng)?;
        let b_t = store.register("pred.time.bias", group, Tensor::zeros(1, 1))?;
        Ok(PredDecoder { mark, w_t, b_t })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.mark.param_ids();
        ids.extend([self.w_t, self.b_t]);
        ids
    }

    /// Predicted intervals `exp(h·W_t + b_t)`, one row per hidden state.
    pub fn intervals(&self, g: &Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let y = linear(g, h, g.param(store, self.w_t), Some(g.param(store, self.b_t)))?;
        Ok(g.exp(y))
    }

    /// `(argmax_k logits_k, t_last + exp(h·W_t + b_t))`.
    pub fn predict_next(&self, store: &ParamStore, h: &[f64], t_last: f64) -> Result<(usize, f64)> {
        let g = Graph::new();
        let hv = g.constant(Tensor::row_vector(h));
        let logits = self.mark.logits(&g, store, hv)?;
        let dt = self.intervals(&g, store, hv)?;
        Ok((argmax(g.value(logits).data()), t_last + g.item(dt)))
    }
}
