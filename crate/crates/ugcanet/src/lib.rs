//! Multi-task endoscopy segmentation/classification network at desk scale:
//! a hierarchical transformer encoder, global context modules (grouped
//! compact non-local attention followed by squeeze-excitation), a
//! feature-aligned pyramid decoder, and indicator-masked multi-task losses,
//! all built on a small deterministic reverse-mode autodiff engine.
//!
//! The crate ships a single `ugcanet` binary with `gradcheck`, `synth`,
//! `train`, `eval`, `experiment` and `ablate` subcommands; see the README
//! for the end-to-end workflow.

pub mod data;
pub mod experiments;
pub mod flops;
pub mod folds;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod opt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError, Value};
