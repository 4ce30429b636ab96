//! VLCap: video paragraph captioning with vision-language snippet features,
//! a memory-gated unified transformer decoder, and a combined
//! likelihood + contrastive training objective.
//!
//! ```text
//! snippets ──► encoder (vision pool+MLP, top-k word cosine + AAM, fuse) ──► F^VL
//!                                                                           │
//! [F^VL ; tokens] ──► decoder layers (masked self-attn, memory attn, FFN) ──► logits
//!                          ▲                     │
//!                          └── M_{t-1} ◄── GRU-style memory update (per event)
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use config::{LossConfig, ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::VlCap;
pub use tensor::{ParamStore, Tape, Tensor, Var};
