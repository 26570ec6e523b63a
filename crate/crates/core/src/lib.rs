//! Adaptation toolkit for a tiny decoder-only transformer: tokenizer
//! fertility, LoRA continued pre-training and fine-tuning, checkpoint
//! merging, multiple-choice evaluation and post-training quantization.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod ckpt;
pub mod evalmc;
pub mod merge;
pub mod model;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tok;
