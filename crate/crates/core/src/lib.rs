//! Multimodal late-fusion machinery for breast-cancer subtyping: whole-slide
//! image tiling and tissue masking, patch graphs, small trainable models,
//! patient-level pooling, fusion strategies, cross-validated evaluation and
//! attribution reports.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gnn;
pub mod graph;
pub mod imaging;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tabular;

pub use error::{Error, Result};
