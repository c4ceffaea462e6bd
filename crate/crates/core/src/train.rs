//! Losses, the training loop and evaluation metrics.
//!
//! Event `i` of a sequence is scored from the hidden state after its first
//! `i` events (teacher forcing). The first event has no history and is left
//! out unless [`ModelConfig::score_first`] is set.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::decoder::{argmax, mixture_log_density, MIN_INTERVAL};
use crate::encoder::Batch;
use crate::error::{Error, Result};
use crate::events::{compute_stats, Dataset, EventSequence};
use crate::model::{Decoder, HorizonUnit, Mode, Model, ModelConfig};
use crate::nn::{adam_step, AdamState, Graph, ParamId, ParamStore, Tensor, Var};
use crate::synth::rng_for;

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Factor applied to the learning rate on a validation plateau.
    pub lr_decay: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Weight of the squared time error in the prediction loss.
    pub beta: f64,
    /// Global gradient-norm cap; zero disables clipping.
    pub grad_clip: f64,
    /// Shards per batch, each processed on its own thread. Results are
    /// reproducible for a fixed value.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 0.5,
            plateau_patience: 3,
            early_stop_patience: 10,
            max_epochs: 100,
            batch_size: 32,
            eval_batch_size: 64,
            seed: 0,
            beta: 0.3,
            grad_clip: 10.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Argument(format!("train.lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Argument(format!("train.beta must be non-negative, got {}", self.beta)));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Argument(format!("train.grad_clip must be non-negative, got {}", self.grad_clip)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("eval_batch_size", self.eval_batch_size),
            ("threads", self.threads),
            ("max_epochs", self.max_epochs),
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(Error::Argument(format!("train.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Target events of a batch in sequence-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    /// Row of the conditioning hidden state.
    pub rows: Vec<usize>,
    pub marks: Vec<usize>,
    /// Interval preceding each target, unfloored.
    pub intervals: Vec<f64>,
}

impl Targets {
    pub fn new(batch: &Batch, score_first: bool) -> Self {
        let nb = batch.size();
        let start = usize::from(!score_first);
        let mut t = Targets {
            rows: Vec::new(),
            marks: Vec::new(),
            intervals: Vec::new(),
        };
        for (b, &len) in batch.lengths().iter().enumerate() {
            for i in start..len {
                t.rows.push(i * nb + b);
                t.marks.push(batch.mark(b, i));
                t.intervals.push(batch.interval(b, i));
            }
        }
        t
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn count_targets(seqs: &[&EventSequence], score_first: bool) -> usize {
    seqs.iter().map(|s| s.len() - usize::from(!score_first)).sum()
}

/// Summed (not averaged) loss pieces for a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossSums {
    /// Mark negative log-likelihood, or cross-entropy in prediction mode.
    pub mark: Var,
    /// Time negative log-likelihood, or squared interval error in prediction mode.
    pub time: Var,
    /// `T × K` mark log-probabilities.
    pub mark_scores: Var,
    pub count: usize,
}

pub fn loss_sums(g: &Graph, model: &Model, store: &ParamStore, batch: &Batch) -> Result<LossSums> {
    let t = Targets::new(batch, model.config.score_first);
    let h = model.encode(g, store, batch)?;
    if t.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        let k = model.config.num_marks;
        return Ok(LossSums {
            mark: zero,
            time: zero,
            mark_scores: g.constant(Tensor::zeros(0, k)),
            count: 0,
        });
    }
    let ht = g.gather_rows(h, t.rows.clone())?;
    let mark_entries: Vec<(usize, usize, f64)> = t.marks.iter().enumerate().map(|(r, &m)| (r, m, -1.0)).collect();
    match &model.decoder {
        Decoder::Dist(dec) => {
            let lp = dec.mark.log_probs(g, store, ht)?;
            let mark = g.pick(lp, mark_entries)?;
            let log_tau: Vec<f64> = t.intervals.iter().map(|&x| x.max(MIN_INTERVAL).ln()).collect();
            let mix = dec.mixture(g, store, ht)?;
            let dens = mixture_log_density(g, mix, g.constant(Tensor::column(&log_tau)))?;
            Ok(LossSums {
                mark,
                time: g.scale(g.sum(dens), -1.0),
                mark_scores: lp,
                count: t.len(),
            })
        }
        Decoder::Pred(dec) => {
            let lp = dec.mark.log_probs(g, store, ht)?;
            let mark = g.pick(lp, mark_entries)?;
            let pred = dec.intervals(g, store, ht)?;
            let diff = g.sub(pred, g.constant(Tensor::column(&t.intervals)))?;
            Ok(LossSums {
                mark,
                time: g.sum(g.square(diff)),
                mark_scores: lp,
                count: t.len(),
            })
        }
    }
}

/// `mark + weight·time`, divided by `denom`.
fn combine(g: &Graph, sums: &LossSums, weight: f64, denom: f64) -> Result<Var> {
    let total = g.add(sums.mark, g.scale(sums.time, weight))?;
    Ok(g.scale(total, 1.0 / denom))
}

fn require_targets(sums: &LossSums) -> Result<()> {
    if sums.count == 0 {
        return Err(Error::Argument("batch has no target events".into()));
    }
    Ok(())
}

/// Negative log-likelihood per target event.
pub fn nll_loss(g: &Graph, model: &Model, store: &ParamStore, batch: &Batch) -> Result<Var> {
    if model.mode() != Mode::Probabilistic {
        return Err(Error::ModeMismatch("nll_loss needs a probabilistic model".into()));
    }
    let sums = loss_sums(g, model, store, batch)?;
    require_targets(&sums)?;
    combine(g, &sums, 1.0, sums.count as f64)
}

/// `(cross-entropy + β·squared error)` per target event.
pub fn pred_loss(g: &Graph, model: &Model, store: &ParamStore, batch: &Batch, beta: f64) -> Result<Var> {
    if model.mode() != Mode::Prediction {
        return Err(Error::ModeMismatch("pred_loss needs a prediction model".into()));
    }
    if !(beta >= 0.0) {
        return Err(Error::Argument(format!("beta must be non-negative, got {beta}")));
    }
    let sums = loss_sums(g, model, store, batch)?;
    require_targets(&sums)?;
    combine(g, &sums, beta, sums.count as f64)
}

/// The loss the model's mode trains on.
pub fn objective(g: &Graph, model: &Model, store: &ParamStore, batch: &Batch, beta: f64) -> Result<Var> {
    match model.mode() {
        Mode::Probabilistic => nll_loss(g, model, store, batch),
        Mode::Prediction => pred_loss(g, model, store, batch, beta),
    }
}

fn time_weight(mode: Mode, beta: f64) -> f64 {
    match mode {
        Mode::Probabilistic => 1.0,
        Mode::Prediction => beta,
    }
}

/// Per-event evaluation results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: Mode,
    pub events: usize,
    /// The mode's own objective.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mark_nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_nll: Option<f64>,
    /// Time NLL of the same predictions expressed in the raw data's units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_nll_original_units: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll_original_units: Option<f64>,
    /// Percentage of targets whose most likely mark is correct.
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_original_units: Option<f64>,
    pub time_scale: f64,
    pub ln_time_scale: f64,
}

impl Metrics {
    /// Flat `key value` lines.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode {}", self.mode);
        let _ = writeln!(out, "events {}", self.events);
        let fields = [
            ("loss", Some(self.loss)),
            ("nll", self.nll),
            ("mark_nll", self.mark_nll),
            ("time_nll", self.time_nll),
            ("nll_original_units", self.nll_original_units),
            ("time_nll_original_units", self.time_nll_original_units),
            ("accuracy", Some(self.accuracy)),
            ("rmse", self.rmse),
            ("rmse_original_units", self.rmse_original_units),
            ("time_scale", Some(self.time_scale)),
            ("ln_time_scale", Some(self.ln_time_scale)),
        ];
        for (k, v) in fields {
            if let Some(v) = v {
                let _ = writeln!(out, "{k} {v}");
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Teacher-forced metrics over every target event of `seqs`, which must
/// already be on the model's time scale.
pub fn evaluate(model: &Model, seqs: &[EventSequence], beta: f64, batch_size: usize) -> Result<Metrics> {
    let mut mark_sum = 0.0;
    let mut time_sum = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for chunk in seqs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk)?;
        let g = Graph::new();
        let sums = loss_sums(&g, model, &model.store, &batch)?;
        mark_sum += g.item(sums.mark);
        time_sum += g.item(sums.time);
        count += sums.count;
        let scores = g.value(sums.mark_scores);
        let t = Targets::new(&batch, model.config.score_first);
        for (r, &m) in t.marks.iter().enumerate() {
            if argmax(scores.row(r)) == m {
                correct += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Argument("no target events to evaluate".into()));
    }
    let n = count as f64;
    let s = model.time_scale;
    let (mark, time) = (mark_sum / n, time_sum / n);
    let mut m = Metrics {
        mode: model.mode(),
        events: count,
        loss: mark + time_weight(model.mode(), beta) * time,
        nll: None,
        mark_nll: None,
        time_nll: None,
        time_nll_original_units: None,
        nll_original_units: None,
        accuracy: 100.0 * correct as f64 / n,
        rmse: None,
        rmse_original_units: None,
        time_scale: s,
        ln_time_scale: s.ln(),
    };
    match model.mode() {
        Mode::Probabilistic => {
            m.nll = Some(mark + time);
            m.mark_nll = Some(mark);
            m.time_nll = Some(time);
            m.time_nll_original_units = Some(time - s.ln());
            m.nll_original_units = Some(mark + time - s.ln());
        }
        Mode::Prediction => {
            let rmse = time.sqrt();
            m.rmse = Some(rmse);
            m.rmse_original_units = Some(rmse / s);
        }
    }
    if !m.loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss {}", m.loss)));
    }
    Ok(m)
}

/// Like [`evaluate`], failing when the model was built for another mode.
pub fn evaluate_as(model: &Model, seqs: &[EventSequence], expected: Mode, beta: f64, batch_size: usize) -> Result<Metrics> {
    if model.mode() != expected {
        return Err(Error::ModeMismatch(format!(
            "checkpoint is a {} model, {} metrics requested",
            model.mode(),
            expected
        )));
    }
    evaluate(model, seqs, beta, batch_size)
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
}

type ShardGrads = Vec<(ParamId, Tensor)>;

fn shard_gradients(model: &Model, seqs: &[&EventSequence], weight: f64, denom: f64) -> Result<(f64, ShardGrads)> {
    let batch = Batch::new(seqs.iter().copied())?;
    let g = Graph::new();
    let sums = loss_sums(&g, model, &model.store, &batch)?;
    if sums.count == 0 {
        return Ok((0.0, Vec::new()));
    }
    let loss = combine(&g, &sums, weight, denom)?;
    let value = g.item(loss);
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, grads.params().into_iter().map(|(id, t)| (id, t.clone())).collect()))
}

/// Mean loss over the batch and the gradients of that mean, summed over
/// `shards` contiguous pieces in order.
fn batch_gradients(model: &Model, seqs: &[&EventSequence], beta: f64, shards: usize) -> Result<(f64, Vec<ShardGrads>)> {
    let denom = count_targets(seqs, model.config.score_first) as f64;
    if denom == 0.0 {
        return Ok((0.0, Vec::new()));
    }
    let weight = time_weight(model.mode(), beta);
    let size = seqs.len().div_ceil(shards.max(1));
    let results: Vec<Result<(f64, ShardGrads)>> = if shards <= 1 || seqs.len() <= 1 {
        vec![shard_gradients(model, seqs, weight, denom)]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = seqs
                .chunks(size)
                .map(|chunk| scope.spawn(move || shard_gradients(model, chunk, weight, denom)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("training shard panicked".into()))))
                .collect()
        })
    };
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(results.len());
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.push(g);
    }
    Ok((loss, grads))
}

fn diverged(epoch: usize, message: String, best: &Model) -> Error {
    Error::Diverged {
        epoch,
        message,
        last_good: Box::new(best.to_checkpoint()),
    }
}

/// Builds a model for `dataset` and trains it. Horizons given in units of δ
/// are resolved against the training split; the mark count and time scale
/// come from the dataset.
pub fn train_model(dataset: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut mc = model_cfg.clone();
    mc.num_marks = dataset.num_marks;
    if mc.horizon_unit == HorizonUnit::Delta && mc.layers > 0 {
        mc = mc.resolve(compute_stats(dataset)?.delta)?;
    }
    let mut model = Model::new(mc, cfg.seed)?;
    model.time_scale = dataset.time_scale;
    train_from(model, &dataset.train, &dataset.valid, cfg)
}

/// Trains an existing model with Adam, learning-rate decay on validation
/// plateaus and early stopping. Returns the best-validation parameters.
pub fn train_from(
    mut model: Model,
    train: &[EventSequence],
    valid: &[EventSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Argument("training needs non-empty train and validation splits".into()));
    }
    let mut adam = AdamState::new(&model.store);
    let mut rng = rng_for(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.lr;
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut since_decay = 0;
    let mut stopped_early = false;
    let score_first = model.config.score_first;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        let mut events = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let seqs: Vec<&EventSequence> = idx.iter().map(|&i| &train[i]).collect();
            let n = count_targets(&seqs, score_first);
            if n == 0 {
                continue;
            }
            let (loss, shards) = batch_gradients(&model, &seqs, cfg.beta, cfg.threads)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("training loss {loss}"), &best));
            }
            model.store.zero_grads();
            for grads in &shards {
                for (id, t) in grads {
                    model.store.accumulate_grad(*id, t)?;
                }
            }
            let norm = if cfg.grad_clip > 0.0 {
                model.store.clip_grad_norm(cfg.grad_clip)
            } else {
                model.store.grad_norm()
            };
            if !norm.is_finite() {
                return Err(diverged(epoch, format!("gradient norm {norm}"), &best));
            }
            adam_step(&mut model.store, &mut adam, lr)?;
            loss_total += loss * n as f64;
            events += n;
        }
        let train_loss = loss_total / events.max(1) as f64;
        let val_loss = match evaluate(&model, valid, cfg.beta, cfg.eval_batch_size) {
            Ok(m) => m.loss,
            Err(Error::NonFinite(msg)) => return Err(diverged(epoch, msg, &best)),
            Err(e) => return Err(e),
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
            if since_decay >= cfg.plateau_patience {
                lr *= cfg.lr_decay;
                since_decay = 0;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val,
        stopped_early,
    })
}
