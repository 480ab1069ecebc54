//! Core library for studying parallel generation in absorbing-state (mask)
//! discrete diffusion language models on desk-scale corpora.
//!
//! The crate provides:
//! - exact weighted corpora with enumeration oracles ([`corpus`]),
//! - masking schedules and the forward corruption process ([`schedule`]),
//! - a Bayes-optimal tabular denoiser and a small trainable
//!   bidirectional-attention network ([`denoiser`]),
//! - training objectives and loops ([`training`]),
//! - reverse-process decoding strategies ([`decoding`]),
//! - the quantitative analysis apparatus: Zipf bounds, perplexity tables,
//!   parallel-sampling metrics and homogenization reports ([`analysis`]).

pub mod analysis;
pub mod corpus;
pub mod decoding;
pub mod denoiser;
pub mod error;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
