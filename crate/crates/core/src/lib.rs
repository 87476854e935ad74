//! Low-rank adapter ensembles on a frozen decoder-only transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`model`]: dense matrices and a small pre-norm transformer
//!   with hand-written reverse-mode gradients.
//! * [`lora`] and [`checkpoint`]: adapters on query/value projections and the
//!   binary formats used to store base models and adapters.
//! * [`train`]: AdamW with selectable decoupled decay, KL-to-base
//!   regularization and the per-member fine-tuning loop.
//! * [`ensemble`]: LoRA ensembles, MC dropout, last-layer ensembles and
//!   few-shot prompting.
//! * [`eval`]: accuracy, NLL, ECE, OOD AUROC and reliability data.
//! * [`data`]: multiple-choice schema, prompt rendering, tokenizer, JSONL
//!   ingestion, synthetic relational tasks and base pretraining.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what the checkpoints store.

pub mod checkpoint;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type BaseModel64 = model::BaseModel<f64>;
pub type BaseModel32 = model::BaseModel<f32>;
pub type LoraAdapter64 = lora::LoraAdapter<f64>;
pub type LoraAdapter32 = lora::LoraAdapter<f32>;
