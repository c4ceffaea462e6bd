//! Intensity-free temporal point processes with continuous convolution
//! encoders.
//!
//! Event histories go through mark [embeddings](encoder::EmbeddingTable),
//! stacks of [local layers](encoder::LocalLayer) whose kernels are small sine
//! networks of the time offset, and a [GRU](encoder::GlobalEncoder). A
//! [decoder](decoder) then gives either a closed-form distribution over the
//! next mark and waiting time or a point prediction of both.
//!
//! ```
//! use ctpp::events::EventSequence;
//! use ctpp::model::{HorizonUnit, Model, ModelConfig};
//!
//! let cfg = ModelConfig { num_marks: 2, dim: 4, hidden: 4, horizon_unit: HorizonUnit::Absolute, ..ModelConfig::default() };
//! let model = Model::new(cfg, 0)?;
//! let seq = EventSequence::from_parts(&[0, 1, 1], &[0.2, 0.9, 1.4])?;
//! assert_eq!(model.hidden_states(&seq)?.shape(), (4, 4));
//! # Ok::<(), ctpp::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decoder;
pub mod encoder;
pub mod error;
pub mod events;
pub mod kernel;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
