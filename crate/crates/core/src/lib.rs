//! Concept bottlenecks built in embedding space.
//!
//! The pipeline mines an n-gram concept vocabulary from a POS-tagged lexicon,
//! filters it against an unlabeled image-embedding pool, quantizes images into
//! their nearest concepts, and trains a linear classifier whose weights are a
//! per-class distribution over concepts.
//!
//! Every stage operates on precomputed embeddings stored as V2CE files; no
//! encoder runs inside this crate.

pub mod cbm;
pub mod conceptfilter;
pub mod embkit;
pub mod pipeline;
pub mod quantset;
pub mod synth;
pub mod tokenizer;
pub mod vocab;

pub use embkit::{EmbError, EmbeddingMatrix, TopKResult};
