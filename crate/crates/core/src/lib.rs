//! Graph-prompted parameter-efficient fine-tuning (GPEFT) at desk scale.
//!
//! A small decoder-only causal language model is conditioned on a "graph
//! prompt": a single dense vector produced by a relation-aware GNN over a
//! node's sampled neighborhood, injected into the sequence as a virtual
//! token. Training runs in two phases — next-token pre-training of the GNN
//! against the frozen LM, then contrastive fine-tuning of the GNN together
//! with PEFT adapters (LoRA or graph-modified prefix tuning) — and the
//! learned node embeddings are evaluated by link-prediction ranking.
//!
//! Everything is CPU-only, deterministic given a seed, and built on a
//! tape-based reverse-mode autodiff engine with a finite-difference
//! gradient-checking oracle.

pub mod ckpt;
pub mod config;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph;
pub mod lm;
pub mod model;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
