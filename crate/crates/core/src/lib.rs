//! Checkpoint compression and asynchronous checkpointing for model training.
//!
//! Model states (F16) are stored as bitmask deltas against the previous
//! checkpoint, optimizer states (F32) through cluster-based 8-bit
//! quantization. Compressed checkpoints are staged into a memory-mapped slot
//! region and persisted to disk by a background agent.

pub mod bitmask;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod normal;
pub mod quant;
pub mod store;
pub mod synth;
pub mod tensor;
mod wire;

pub use error::{Error, Result};
pub use tensor::{Checkpoint, ElementType, TensorBlob};
