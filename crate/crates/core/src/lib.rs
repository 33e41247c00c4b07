//! Hierarchical text classification as sequence-to-sequence prediction.
//!
//! A bidirectional GRU encoder reads the document, and an attention GRU
//! decoder emits one class per taxonomy level, top level first. Three
//! optional strategies sit on top of that baseline:
//!
//! * an auxiliary task trained on the reversed (child-to-parent) label path,
//!   interleaved with the main task every few epochs ([`training`]);
//! * parent-node conditioning, where the definition vector of the previous
//!   level's class is fed into the attention scores ([`neural`]);
//! * an adapted beam search that adds a definition/document similarity term
//!   to the cumulative log-probability ([`decode`]).
//!
//! Everything runs on the CPU in 64-bit floats with hand-written
//! reverse-mode gradients.

pub mod cdv;
pub mod corpus;
pub mod decode;
pub mod embeddings;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod taxonomy;
pub mod training;

pub use error::{Error, Result};
