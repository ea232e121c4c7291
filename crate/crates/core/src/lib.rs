//! Utterance-level emotion classification over multimodal conversations.
//!
//! The pipeline encodes each modality (text, audio, visual) of a conversation
//! to a shared width, adds learned speaker embeddings, runs a stack of
//! windowed graph-attention layers per modality to mix conversational
//! context, exchanges information across modalities with pairwise multi-head
//! cross-attention blocks, and classifies each utterance from the fused
//! representation.
//!
//! Everything is built on the in-crate [`tensor`] module: dense `f64`
//! matrices with tape-based reverse-mode automatic differentiation and an
//! AdamW optimizer. No external numerics are involved, which keeps training
//! runs bit-reproducible under a fixed seed.

pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod mdgat;
pub mod model;
pub mod mpcat;
pub mod tensor;
pub mod trainer;
