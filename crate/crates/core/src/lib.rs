//! Language-motion pretraining toolkit.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`corpus`]: motion/text datasets, normalization and the synthetic corpus generator.
//! * [`vq`]: the VQ-VAE motion tokenizer (encoder, codebook, decoder, EMA + code reset).
//! * [`alignment`]: the language–motion alignment transformer and its four training objectives.
//! * [`generator`]: masked-prediction text-to-motion generation with classifier-free guidance.
//! * [`retrieval`]: text↔motion retrieval over aligned features.
//! * [`captioner`]: motion captioning and the token-level BertScore metric.
//! * [`metrics`]: FID, R-precision, multimodal distance, diversity and the evaluation protocol.
//! * [`config`] / [`pipeline`]: run configuration and end-to-end orchestration.

pub mod alignment;
pub mod captioner;
pub mod checkpoint;
pub mod config;
pub mod corpus;
mod error;
pub mod generator;
pub mod invariants;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod seed;
pub mod text;
pub mod vq;

pub use error::{Error, Result};
