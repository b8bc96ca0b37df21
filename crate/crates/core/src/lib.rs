//! Dual-level public-response prediction.
//!
//! Micro level: a byte-level toy transformer whose attention projections
//! carry PAC-LoRA adapters (gated analyzing/writing experts) generates a
//! personalized response from a user's persona, BM25-retrieved history and a
//! news topic. Macro level: responses are classified into a seven-label
//! sentiment taxonomy, aggregated per topic and compared with the observed
//! distribution via Jensen-Shannon divergence.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod model;
pub mod pac_lora;
pub mod persona;
pub mod pipeline;
pub mod provider;
pub mod retrieval;
pub mod sentiment;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use exec::Execution;
