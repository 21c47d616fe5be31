//! Anticipation-free simultaneous translation on a causal CTC encoder.
//!
//! During training an auxiliary sorting network produces a (near) permutation
//! matrix with the Gumbel-Sinkhorn operator and reorders the encoder states
//! into target order before the CTC loss. At inference the sorting network is
//! dropped and the encoder is streamed token by token.
//!
//! The crate is `no_std` with `alloc`; file IO, clocks and the command-line
//! driver live in the `sortsimul` companion crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod ctc;
pub mod encoder;
mod error;
pub mod graph;
pub mod kernels;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod sorting;
pub mod streaming;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{Tensor, TensorError};

/// CTC blank symbol.
pub const BLANK_ID: u32 = 0;
/// Padding symbol used by [`synth::make_batches`].
pub const PAD_ID: u32 = 1;
/// First id available to real tokens.
pub const FIRST_TOKEN_ID: u32 = 2;
