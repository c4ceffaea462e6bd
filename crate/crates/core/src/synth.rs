//! Seeded samplers for processes with known ground truth.
//!
//! Every sampler draws from a ChaCha8 stream seeded by the caller, so the same
//! `(spec, seed)` produces the same sequence on every platform.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Exp1, LogNormal};

use crate::error::{Error, Result};
use crate::events::{Event, EventSequence};

/// How long a sampled sequence runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Extent {
    /// Exactly this many events.
    Count(usize),
    /// All events in `[0, T]`.
    Horizon(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSpec {
    pub rate: f64,
    pub mark_probs: Vec<f64>,
    pub extent: Extent,
}

/// Univariate Hawkes process with excitation kernel `α·exp(-b·τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HawkesSpec {
    pub mu: f64,
    pub alpha: f64,
    pub decay: f64,
    pub horizon: f64,
    /// Marks are drawn i.i.d. from this vector; `[1.0]` gives a single mark.
    pub mark_probs: Vec<f64>,
}

/// Renewal process with `LogNormal(log_mean, log_std)` intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct RenewalSpec {
    pub log_mean: f64,
    pub log_std: f64,
    pub count: usize,
    pub mark_probs: Vec<f64>,
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mark_sampler(probs: &[f64]) -> Result<WeightedIndex<f64>> {
    if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::Argument(format!("invalid mark probabilities {probs:?}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Argument(format!("mark probabilities sum to {total}, not 1")));
    }
    WeightedIndex::new(probs).map_err(|e| Error::Argument(e.to_string()))
}

fn finish(events: Vec<Event>) -> Result<EventSequence> {
    EventSequence::new(events).map_err(|_| Error::Argument("sampled window contains no events".into()))
}

/// Homogeneous Poisson process with i.i.d. categorical marks.
pub fn sample_poisson(spec: &PoissonSpec, seed: u64) -> Result<EventSequence> {
    if !(spec.rate > 0.0) || !spec.rate.is_finite() {
        return Err(Error::Argument(format!("rate must be positive, got {}", spec.rate)));
    }
    let marks = mark_sampler(&spec.mark_probs)?;
    let gaps = Exp::new(spec.rate).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = rng_for(seed);
    let mut t = 0.0;
    let mut events = Vec::new();
    match spec.extent {
        Extent::Count(n) => {
            if n == 0 {
                return Err(Error::Argument("event count must be at least 1".into()));
            }
            for _ in 0..n {
                t += gaps.sample(&mut rng);
                events.push(Event {
                    mark: marks.sample(&mut rng),
                    time: t,
                });
            }
        }
        Extent::Horizon(horizon) => {
            if !(horizon > 0.0) {
                return Err(Error::Argument(format!("horizon must be positive, got {horizon}")));
            }
            loop {
                t += gaps.sample(&mut rng);
                if t > horizon {
                    break;
                }
                events.push(Event {
                    mark: marks.sample(&mut rng),
                    time: t,
                });
            }
        }
    }
    finish(events)
}

/// Hawkes process on `[0, T]` by Ogata thinning.
///
/// The intensity `λ(t) = μ + Σ_{t_j < t} α·exp(-b(t - t_j))` only decays
/// between events, so its value just after the current time bounds it until
/// the next acceptance. Candidates are drawn from a Poisson process at that
/// bound and kept with probability `λ(candidate) / bound`.
pub fn sample_hawkes(spec: &HawkesSpec, seed: u64) -> Result<EventSequence> {
    let HawkesSpec {
        mu,
        alpha,
        decay,
        horizon,
        ..
    } = *spec;
    if !(mu > 0.0) || !(alpha >= 0.0) || !(decay > 0.0) || !(horizon > 0.0) {
        return Err(Error::Argument(format!(
            "need mu > 0, alpha >= 0, decay > 0, horizon > 0; got {mu}, {alpha}, {decay}, {horizon}"
        )));
    }
    let ratio = alpha / decay;
    if ratio >= 1.0 {
        return Err(Error::Stationarity { ratio });
    }
    let marks = mark_sampler(&spec.mark_probs)?;
    let mut rng = rng_for(seed);
    let mut events = Vec::new();
    let mut t = 0.0;
    // Σ α·exp(-b(t - t_j)) at the current time t.
    let mut excitation = 0.0;
    loop {
        let bound = mu + excitation;
        let wait: f64 = rng.sample::<f64, _>(Exp1) / bound;
        let candidate = t + wait;
        if candidate > horizon {
            break;
        }
        excitation *= (-decay * wait).exp();
        t = candidate;
        let accept: f64 = rng.random();
        if accept * bound <= mu + excitation {
            excitation += alpha;
            events.push(Event {
                mark: marks.sample(&mut rng),
                time: t,
            });
        }
    }
    finish(events)
}

/// Renewal process with i.i.d. log-normal intervals, the first measured from 0.
pub fn sample_lognormal_renewal(spec: &RenewalSpec, seed: u64) -> Result<EventSequence> {
    if !(spec.log_std > 0.0) || !spec.log_mean.is_finite() {
        return Err(Error::Argument(format!(
            "need finite log-mean and positive log-std, got {} and {}",
            spec.log_mean, spec.log_std
        )));
    }
    if spec.count == 0 {
        return Err(Error::Argument("event count must be at least 1".into()));
    }
    let marks = mark_sampler(&spec.mark_probs)?;
    let gaps = LogNormal::new(spec.log_mean, spec.log_std).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = rng_for(seed);
    let mut t = 0.0;
    let events = (0..spec.count)
        .map(|_| {
            t += gaps.sample(&mut rng);
            Event {
                mark: marks.sample(&mut rng),
                time: t,
            }
        })
        .collect();
    finish(events)
}

/// Derives the seed of the `index`-th sequence in a generated corpus.
pub fn sequence_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}
