//! Local convolutional encoder and recurrent global encoder.
//!
//! Sequences are processed in padded batches. Row `b·L + i` of every
//! per-event matrix belongs to event `i` of sequence `b`, where `L` is the
//! longest sequence in the batch. Padding rows never take part in a
//! convolution pair and are masked out of the recurrence, so they cannot
//! influence any valid output.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::kernel::{KernelMode, SirenKernel};
use crate::nn::{default_init_bound, Graph, GruCell, ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Look-back window of a convolution channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Horizon {
    Finite(f64),
    Infinite,
}

impl Horizon {
    pub fn new(value: f64) -> Result<Self> {
        if value == f64::INFINITY {
            Ok(Horizon::Infinite)
        } else if value > 0.0 && value.is_finite() {
            Ok(Horizon::Finite(value))
        } else {
            Err(Error::Argument(format!("horizon must be positive, got {value}")))
        }
    }

    pub fn contains(self, tau: f64) -> bool {
        match self {
            Horizon::Finite(eta) => tau <= eta,
            Horizon::Infinite => true,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Horizon::Finite(eta) => eta,
            Horizon::Infinite => f64::INFINITY,
        }
    }

    pub fn scaled(self, s: f64) -> Horizon {
        match self {
            Horizon::Finite(eta) => Horizon::Finite(eta * s),
            Horizon::Infinite => Horizon::Infinite,
        }
    }
}

impl fmt::Display for Horizon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Horizon::Finite(eta) => write!(f, "{eta}"),
            Horizon::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Horizon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinite" => Ok(Horizon::Infinite),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Argument(format!("cannot parse horizon `{other}`")))?;
                Horizon::new(v)
            }
        }
    }
}

impl Serialize for Horizon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Horizon::Finite(eta) => s.serialize_f64(*eta),
            Horizon::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(v) => Horizon::new(v),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Padded view of several sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    lengths: Vec<usize>,
    max_len: usize,
    marks: Vec<usize>,
    times: Vec<f64>,
}

impl Batch {
    pub fn new<'a>(seqs: impl IntoIterator<Item = &'a EventSequence>) -> Result<Self> {
        let seqs: Vec<&EventSequence> = seqs.into_iter().collect();
        if seqs.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut marks = vec![0; seqs.len() * max_len];
        let mut times = vec![0.0; seqs.len() * max_len];
        for (b, s) in seqs.iter().enumerate() {
            for (i, e) in s.events().iter().enumerate() {
                marks[b * max_len + i] = e.mark;
                times[b * max_len + i] = e.time;
            }
        }
        Ok(Batch {
            lengths: seqs.iter().map(|s| s.len()).collect(),
            max_len,
            marks,
            times,
        })
    }

    pub fn single(seq: &EventSequence) -> Self {
        Batch::new([seq]).expect("one sequence is a valid batch")
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn num_rows(&self) -> usize {
        self.lengths.len() * self.max_len
    }

    pub fn row(&self, b: usize, i: usize) -> usize {
        b * self.max_len + i
    }

    pub fn is_valid(&self, b: usize, i: usize) -> bool {
        i < self.lengths[b]
    }

    /// Padded marks, one per row. Padding rows hold mark 0.
    pub fn marks(&self) -> &[usize] {
        &self.marks
    }

    pub fn mark(&self, b: usize, i: usize) -> usize {
        self.marks[self.row(b, i)]
    }

    pub fn time(&self, b: usize, i: usize) -> f64 {
        self.times[self.row(b, i)]
    }

    /// Interval preceding event `i`, with the timeline starting at zero.
    pub fn interval(&self, b: usize, i: usize) -> f64 {
        if i == 0 {
            self.time(b, 0)
        } else {
            self.time(b, i) - self.time(b, i - 1)
        }
    }

    /// Every `(dst, src, τ)` with `src` strictly before `dst` in the same
    /// sequence and `τ = t_dst − t_src` inside the horizon. Rows are batch rows.
    pub fn causal_pairs(&self, horizon: Horizon) -> Vec<(usize, usize, f64)> {
        let mut pairs = Vec::new();
        for (b, &len) in self.lengths.iter().enumerate() {
            for i in 1..len {
                let ti = self.time(b, i);
                for j in (0..i).rev() {
                    let tau = ti - self.time(b, j);
                    if !horizon.contains(tau) {
                        break;
                    }
                    pairs.push((self.row(b, i), self.row(b, j), tau));
                }
            }
        }
        pairs
    }
}

/// Mark embedding table, `K × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub num_marks: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Entries drawn from `uniform(±1/√d)`.
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, num_marks: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if num_marks == 0 || dim == 0 {
            return Err(Error::Argument("embedding needs K ≥ 1 and d ≥ 1".into()));
        }
        let table = store.register_uniform("embedding", ParamGroup::Embedding, num_marks, dim, default_init_bound(dim), rng)?;
        Ok(EmbeddingTable { table, num_marks, dim })
    }

    /// One row per mark.
    pub fn embed(&self, g: &Graph, store: &ParamStore, marks: &[usize]) -> Result<Var> {
        if let Some(&m) = marks.iter().find(|&&m| m >= self.num_marks) {
            return Err(Error::Index {
                index: m,
                len: self.num_marks,
            });
        }
        g.gather_rows(g.param(store, self.table), marks.to_vec())
    }
}

/// One continuous convolution channel over the batch:
/// `c_i = Σ_{j<i, t_i−t_j ≤ η} ψ(t_i − t_j)·e_j`.
pub fn conv_channel(
    g: &Graph,
    store: &ParamStore,
    e: Var,
    batch: &Batch,
    kernel: &SirenKernel,
    horizon: Horizon,
) -> Result<Var> {
    let (rows, d) = g.value(e).shape();
    if rows != batch.num_rows() || d != kernel.dim {
        return Err(Error::Shape(format!(
            "conv input {rows}x{d}, batch has {} rows, kernel width {}",
            batch.num_rows(),
            kernel.dim
        )));
    }
    let pairs = batch.causal_pairs(horizon);
    if pairs.is_empty() {
        return Ok(g.constant(Tensor::zeros(rows, d)));
    }
    let taus = Tensor::column(&pairs.iter().map(|p| p.2).collect::<Vec<_>>());
    let k = kernel.eval(g, store, g.constant(taus))?;
    let idx: Vec<(usize, usize)> = pairs.iter().map(|&(i, j, _)| (i, j)).collect();
    g.pair_conv(k, e, idx, kernel.mode.pair_mode())
}

/// A convolution channel: kernel plus horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub kernel: SirenKernel,
    pub horizon: Horizon,
}

/// `LayerNorm([c¹ … c^C]·W^O + E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLayer {
    pub channels: Vec<Channel>,
    pub proj: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Settings shared by the kernels of a local layer.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelSettings {
    pub mode: KernelMode,
    pub hidden: Vec<usize>,
    pub omega0: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LocalLayer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        index: usize,
        dim: usize,
        horizons: &[Horizon],
        kernels: &KernelSettings,
        rng: &mut R,
    ) -> Result<Self> {
        if horizons.is_empty() {
            return Err(Error::Argument("a local layer needs at least one channel".into()));
        }
        let prefix = format!("local.{index}");
        let mut channels = Vec::with_capacity(horizons.len());
        for (c, &horizon) in horizons.iter().enumerate() {
            let kernel = SirenKernel::register(
                store,
                &format!("{prefix}.channel.{c}.siren"),
                dim,
                kernels.mode,
                &kernels.hidden,
                kernels.omega0,
                rng,
            )?;
            channels.push(Channel { kernel, horizon });
        }
        let fan_in = horizons.len() * dim;
        let proj = store.register_uniform(
            format!("{prefix}.proj"),
            ParamGroup::Aggregation,
            fan_in,
            dim,
            default_init_bound(fan_in),
            rng,
        )?;
        let gain = store.register(format!("{prefix}.norm.gain"), ParamGroup::Aggregation, Tensor::filled(1, dim, 1.0))?;
        let bias = store.register(format!("{prefix}.norm.bias"), ParamGroup::Aggregation, Tensor::zeros(1, dim))?;
        Ok(LocalLayer {
            channels,
            proj,
            gain,
            bias,
        })
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, e: Var, batch: &Batch) -> Result<Var> {
        let parts = self
            .channels
            .iter()
            .map(|ch| conv_channel(g, store, e, batch, &ch.kernel, ch.horizon))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&parts)?;
        let mixed = g.matmul(cat, g.param(store, self.proj))?;
        let res = g.add(mixed, e)?;
        g.layer_norm(res, g.param(store, self.gain), g.param(store, self.bias), LAYER_NORM_EPS)
    }
}

/// Applies the layers in order. An empty stack returns `e` unchanged.
pub fn local_encode(g: &Graph, store: &ParamStore, e: Var, batch: &Batch, layers: &[LocalLayer]) -> Result<Var> {
    layers.iter().try_fold(e, |x, layer| layer.forward(g, store, x, batch))
}

/// GRU over the local features with the preceding interval appended.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEncoder {
    pub gru: GruCell,
    /// Feed `ln(1 + Δt)` instead of `Δt`.
    pub log_interval: bool,
}

impl GlobalEncoder {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        hidden: usize,
        log_interval: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let gru = GruCell::register(store, "gru", ParamGroup::Gru, dim + 1, hidden, rng)?;
        Ok(GlobalEncoder { gru, log_interval })
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.hidden_dim
    }

    /// Runs the recurrence from `h₀ = 0`. The result has `(L + 1)·B` rows:
    /// row `i·B + b` is the state of sequence `b` after its first `i` events,
    /// so block 0 is `h₀`. States past a sequence's end repeat its last state.
    pub fn forward(&self, g: &Graph, store: &ParamStore, features: Var, batch: &Batch) -> Result<Var> {
        let (rows, d) = g.value(features).shape();
        if rows != batch.num_rows() || d + 1 != self.gru.input_dim {
            return Err(Error::Shape(format!(
                "global encoder expects {}x{}, got {rows}x{d}",
                batch.num_rows(),
                self.gru.input_dim - 1
            )));
        }
        let nb = batch.size();
        let mut h = g.constant(Tensor::zeros(nb, self.hidden_dim()));
        let mut states = vec![h];
        for i in 0..batch.max_len() {
            let idx: Vec<usize> = (0..nb).map(|b| batch.row(b, i)).collect();
            let c = g.gather_rows(features, idx)?;
            let dt: Vec<f64> = (0..nb)
                .map(|b| {
                    let dt = batch.interval(b, i);
                    if self.log_interval {
                        dt.ln_1p()
                    } else {
                        dt
                    }
                })
                .collect();
            let x = g.concat_cols(&[c, g.constant(Tensor::column(&dt))])?;
            let next = self.gru.step(g, store, h, x)?;
            let mask: Vec<bool> = (0..nb).map(|b| batch.is_valid(b, i)).collect();
            h = if mask.iter().all(|&m| m) {
                next
            } else {
                g.select_rows(next, h, mask)?
            };
            states.push(h);
        }
        g.concat_rows(&states)
    }
}
