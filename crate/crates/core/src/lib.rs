//! Awareness-vector analysis of a language model's hidden states.
//!
//! The pipeline runs a small byte-level transformer over a document, takes
//! the hidden state of every block at the final generated token, and scores
//! each intermediate block by its cosine similarity to the last one. Those
//! per-layer profiles feed a familiar/unfamiliar classifier, which in turn
//! drives training-split selection and LoRA fine-tuning diagnostics.

pub mod awareness;
mod binio;
pub mod classifier;
pub mod digest;
pub mod error;
pub mod fmt;
pub mod gradcheck;
pub mod label;
pub mod lm;
pub mod lora;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod selection;
pub mod sft;
pub mod synth;
pub mod tensor;

pub use awareness::{AwarenessVector, ExtractOptions};
pub use error::{KamirError, Result};
pub use label::Label;
pub use lm::{HiddenStateTrace, LmConfig, MiniLmModel, TraceAnchor};
pub use lora::{attach_lora, merge_adapter, AdaptedModel, LoraAdapter, LoraTarget};
pub use rng::SeededRng;
pub use tensor::DenseMatrix;
