//! Configuration, error mapping and the end-to-end pipeline behind the
//! `adaptkit` binary.

// `!(x > 0.0)` style checks also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;
