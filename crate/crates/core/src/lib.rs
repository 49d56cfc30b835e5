//! Query-distilled, gated multimodal fusion with a sparse mixture-of-experts
//! classification head, trainable end to end on a CPU.
//!
//! Pipeline: two token sequences (image, text) are each distilled by a bank
//! of learnable queries ([`attention`]), aligned with a contrastive loss
//! ([`losses`]), fused by a per-token gate ([`gating`]), compressed to two
//! tokens by a second query bank, and classified by a top-k
//! mixture of experts ([`moe`]). [`data`] generates seeded synthetic
//! token sequences that stand in for frozen encoders; [`training`] holds
//! the model, optimizer and evaluation; [`cli`] wires it into reproducible
//! runs.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod losses;
pub mod moe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{ParamId, ParamStore, Tape, Tensor, Var};
