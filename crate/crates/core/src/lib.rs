//! Denoising pretraining for neural machine translation.
//!
//! A parallel corpus `B = {(x_i, y_i)}` is split into two monolingual
//! denoising sets, `(noised(x_i), x_i)` and `(noised(y_i), y_i)`. A shared
//! encoder-decoder is trained on those for the first third of the step budget
//! and then fine-tuned on `B` for the remainder.

pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod noising;
pub mod pipeline;
pub mod rng;
pub mod subword;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
