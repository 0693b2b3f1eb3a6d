#![cfg_attr(not(test), no_std)]

//! Structured channel pruning and simulated 8-bit quantization for
//! convolutional detection graphs.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem or the command line lives in the `slimgraph` companion crate.
//!
//! Layout:
//! - [`tensor`], [`ops`], [`autodiff`]: dense f32 tensors, forward kernels and a
//!   reverse-mode tape.
//! - [`graph`]: the typed computation graph, shape inference, the module zoo
//!   (C3K2, C2PSA, SPPF, SPAB, A2C2f, Detect) and the mini presets.
//! - [`depgraph`]: coupled-channel group resolution.
//! - [`pruner`]: l1 scoring, channel selection, slim rebuild and the
//!   zero-embedding oracle.
//! - [`fakequant`]: histogram calibration, quantize-dequantize, binary16 export.
//! - [`metrics`]: parameter / FLOP / memory accounting and report tables.
//! - [`pipeline`]: the synthetic task, training loop and prune+QAT schedule.

extern crate alloc;

pub mod autodiff;
pub mod depgraph;
pub mod error;
pub mod fakequant;
pub mod fp16;
pub mod graph;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod pruner;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
