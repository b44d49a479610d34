//! One-stage open-retrieval conversational machine reading.
//!
//! Rule texts are retrieved for a (question, scenario) query, each candidate
//! is encoded together with the dialogue context, and a decoder generates
//! either a decision (`Yes`/`No`) or a follow-up question from the fused
//! word-level representations. During training an auxiliary head classifies
//! the entailment state of each discourse unit of the gold rule.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod entail;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod matrix;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod scalar;
pub mod segment;
pub mod synth;
pub mod text;
pub mod train;

pub use scalar::Scalar;
pub use error::{Error, Result};

pub type ReaderF32 = model::Reader<f32>;
pub type ReaderF64 = model::Reader<f64>;
pub type CheckpointF32 = model::Checkpoint<f32>;
pub type DualEncoderF32 = retrieval::DualEncoder<f32>;
pub type DualEncoderF64 = retrieval::DualEncoder<f64>;
