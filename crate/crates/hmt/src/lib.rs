//! Hierarchical memory transformer at desk scale.
//!
//! Segment-level recurrence around a small decoder-only backbone with three
//! memory strata: the last `k` token embeddings of the previous segment
//! (sensory), a single learned memory embedding passed segment to segment
//! (short-term), and a FIFO cache of the most recent `N` memory embeddings
//! searched by cross-attention (long-term). The crate ships the full
//! training stack — reverse-mode autodiff over dense `f64` tensors,
//! truncated backpropagation through time, two-stage training, checkpoint
//! persistence — plus dataset builders and an evaluation/ablation suite.
//!
//! Start from the runnable programs in `examples/`; the `hmt` binary exposes
//! the same entry points as subcommands.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalsuite;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod recurrence;

pub use error::{HmtError, Result};
