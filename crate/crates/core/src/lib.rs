//! Anchor-guided compression of long meeting transcripts for summarization.
//!
//! A small encoder-decoder learns to reconstruct each sentence from the
//! sentences before it. The gradient-scaled cross-attention of that
//! reconstruction rates every context token; the best-rated tokens become
//! anchors. The summarizer then pools token embeddings into a fixed number
//! of buckets whose size grows with distance from the nearest anchor, and
//! decodes a summary from the compressed sequence.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod rpb;
pub mod scoring;
pub mod seq2seq;
pub mod summarizer;
pub mod synth;
pub mod tokenizer;
pub mod transcript;

pub use error::{Error, Result};
