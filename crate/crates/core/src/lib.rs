//! Desk-scale transformer compression toolkit: calibration-driven depth
//! pruning, low-rank recovery fine-tuning, and activation-aware group
//! quantization over a self-contained toy decoder-only language model,
//! plus the evaluation harness and pipeline that compare the compression
//! configurations against each other.

// Indexed loops are the clearer idiom in the attention and backprop
// kernels, where bounds carry meaning (triangular masks, head slices).
#![allow(clippy::needless_range_loop)]

pub mod calibration;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod matrix;
pub mod model;
pub mod pipeline;
pub mod pruner;
pub mod quant;
pub mod quantizer;
pub mod tokenizer;

pub use error::{Error, Result};
