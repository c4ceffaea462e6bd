//! Full model assembly and checkpoints.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::decoder::{DistDecoder, PredDecoder};
use crate::encoder::{local_encode, Batch, EmbeddingTable, GlobalEncoder, Horizon, KernelSettings, LocalLayer};
use crate::error::{Error, Result};
use crate::events::EventSequence;
use crate::kernel::KernelMode;
use crate::nn::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::synth::rng_for;

/// Which decoder and objective a model is built for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Categorical mark plus log-normal mixture interval, trained by likelihood.
    #[default]
    Probabilistic,
    /// Direct mark and interval prediction, trained by cross-entropy plus squared error.
    Prediction,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Probabilistic => "probabilistic",
            Mode::Prediction => "prediction",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilistic" | "prob" => Ok(Mode::Probabilistic),
            "prediction" | "pred" => Ok(Mode::Prediction),
            other => Err(Error::Argument(format!("unknown mode `{other}`"))),
        }
    }
}

/// Units of the configured horizons.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HorizonUnit {
    /// Multiples of the mean training interval δ.
    #[default]
    Delta,
    /// Time units of the (possibly rescaled) data.
    Absolute,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_marks: usize,
    /// Embedding width `d`.
    pub dim: usize,
    /// GRU state width `d_h`.
    pub hidden: usize,
    /// Number of stacked local layers `N`; zero removes the local encoder.
    pub layers: usize,
    /// One horizon per channel, shared by every layer.
    pub horizons: Vec<Horizon>,
    pub horizon_unit: HorizonUnit,
    pub omega0: f64,
    pub kernel_hidden: Vec<usize>,
    pub kernel_mode: KernelMode,
    /// Mixture components `M`.
    pub components: usize,
    pub mode: Mode,
    pub mark_bias: bool,
    pub log_interval: bool,
    /// Also score the first event of each sequence from `h₀`.
    pub score_first: bool,
    /// Replace every hidden state with zeros, leaving only decoder biases.
    pub frozen_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_marks: 1,
            dim: 32,
            hidden: 32,
            layers: 1,
            horizons: vec![Horizon::Finite(1.0), Horizon::Finite(3.0)],
            horizon_unit: HorizonUnit::Delta,
            omega0: 10.0,
            kernel_hidden: vec![32, 32, 32],
            kernel_mode: KernelMode::Full,
            components: 16,
            mode: Mode::Probabilistic,
            mark_bias: false,
            log_interval: false,
            score_first: false,
            frozen_encoder: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_marks", self.num_marks),
            ("dim", self.dim),
            ("hidden", self.hidden),
            ("components", self.components),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Argument(format!("model.{name} must be at least 1")));
            }
        }
        if self.layers > 0 && self.horizons.is_empty() {
            return Err(Error::Argument("model.horizons needs at least one channel".into()));
        }
        if self.kernel_hidden.is_empty() || self.kernel_hidden.contains(&0) {
            return Err(Error::Argument("model.kernel_hidden needs non-empty layers".into()));
        }
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(Error::Argument(format!("model.omega0 must be positive, got {}", self.omega0)));
        }
        Ok(())
    }

    /// Converts δ-relative horizons to absolute ones.
    pub fn resolve(&self, delta: f64) -> Result<ModelConfig> {
        let mut out = self.clone();
        if self.horizon_unit == HorizonUnit::Delta {
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(Error::Argument(format!(
                    "horizons are multiples of δ but δ = {delta}"
                )));
            }
            out.horizons = self.horizons.iter().map(|h| h.scaled(delta)).collect();
            out.horizon_unit = HorizonUnit::Absolute;
        }
        Ok(out)
    }

    pub fn channels(&self) -> usize {
        self.horizons.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Dist(DistDecoder),
    Pred(PredDecoder),
}

/// Parameters plus the structure that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: EmbeddingTable,
    pub local: Vec<LocalLayer>,
    pub global: GlobalEncoder,
    pub decoder: Decoder,
    /// Factor applied to raw data times before they reach the model.
    pub time_scale: f64,
}

impl Model {
    /// Builds a freshly initialized model. Horizons must be absolute.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.horizon_unit != HorizonUnit::Absolute && config.layers > 0 {
            return Err(Error::Argument(
                "horizons are still relative to δ; resolve the config against a dataset first".into(),
            ));
        }
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let embedding = EmbeddingTable::register(&mut store, config.num_marks, config.dim, &mut rng)?;
        let kernels = KernelSettings {
            mode: config.kernel_mode,
            hidden: config.kernel_hidden.clone(),
            omega0: config.omega0,
        };
        let local = (0..config.layers)
            .map(|l| LocalLayer::register(&mut store, l, config.dim, &config.horizons, &kernels, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let global = GlobalEncoder::register(&mut store, config.dim, config.hidden, config.log_interval, &mut rng)?;
        let decoder = match config.mode {
            Mode::Probabilistic => Decoder::Dist(DistDecoder::register(
                &mut store,
                config.hidden,
                config.num_marks,
                config.components,
                config.mark_bias,
                &mut rng,
            )?),
            Mode::Prediction => Decoder::Pred(PredDecoder::register(
                &mut store,
                config.hidden,
                config.num_marks,
                config.mark_bias,
                &mut rng,
            )?),
        };
        Ok(Model {
            config,
            store,
            embedding,
            local,
            global,
            decoder,
            time_scale: 1.0,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Hidden states for a batch, laid out as in [`GlobalEncoder::forward`].
    pub fn encode(&self, g: &Graph, store: &ParamStore, batch: &Batch) -> Result<Var> {
        if self.config.frozen_encoder {
            let rows = (batch.max_len() + 1) * batch.size();
            return Ok(g.constant(Tensor::zeros(rows, self.config.hidden)));
        }
        let e = self.embedding.embed(g, store, batch.marks())?;
        let c = local_encode(g, store, e, batch, &self.local)?;
        self.global.forward(g, store, c, batch)
    }

    /// Local features (output of the last local layer), one row per event.
    pub fn local_features(&self, seq: &EventSequence) -> Result<Tensor> {
        let batch = Batch::single(seq);
        let g = Graph::new();
        let e = self.embedding.embed(&g, &self.store, batch.marks())?;
        let c = local_encode(&g, &self.store, e, &batch, &self.local)?;
        Ok(g.value(c).as_ref().clone())
    }

    /// `(L + 1) × d_h`: row `i` is the state after the first `i` events.
    pub fn hidden_states(&self, seq: &EventSequence) -> Result<Tensor> {
        let g = Graph::new();
        let h = self.encode(&g, &self.store, &Batch::single(seq))?;
        Ok(g.value(h).as_ref().clone())
    }

    pub fn has_kernels(&self) -> bool {
        !self.local.is_empty()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            time_scale: self.time_scale,
            params: self
                .store
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    group: p.group.name().to_string(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    data: B64.encode(p.value.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>()),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut model = Model::new(ckpt.config.clone(), 0)?;
        if ckpt.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                model.store.len()
            )));
        }
        for rec in &ckpt.params {
            let id = model
                .store
                .id(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", rec.name)))?;
            if ParamGroup::from_name(&rec.group) != Some(model.store.param(id).group) {
                return Err(Error::Checkpoint(format!("`{}` has group `{}`", rec.name, rec.group)));
            }
            let bytes = B64
                .decode(&rec.data)
                .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", rec.name)))?;
            if bytes.len() != rec.rows * rec.cols * 8 {
                return Err(Error::Checkpoint(format!("`{}`: payload has {} bytes", rec.name, bytes.len())));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            model
                .store
                .set(id, Tensor::from_vec(rec.rows, rec.cols, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !(ckpt.time_scale > 0.0 && ckpt.time_scale.is_finite()) {
            return Err(Error::Checkpoint(format!("time_scale {}", ckpt.time_scale)));
        }
        model.time_scale = ckpt.time_scale;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "ctpp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializable model: config, time scale and every parameter as
/// little-endian `f64` bytes in base64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub time_scale: f64,
    pub params: Vec<ParamRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&text)
    }
}
