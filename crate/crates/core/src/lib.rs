//! Quantization-aware training toolkit built around a small reverse-mode autodiff engine.
//!
//! The crate contains fake quantizers (uniform, PACT, LSQ, LSQ+), a gradient-balanced
//! fusion block, SimAM attention distillation, a toy two-branch detector with a synthetic
//! dataset, training loops with a per-branch gradient probe, and the experiment matrix
//! used by the `qfuse` command-line tool.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with the bad range.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod par;
pub mod probe;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
