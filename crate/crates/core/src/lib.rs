//! Learnable adaptive KV caching for transformer inference over frame streams.
//!
//! A small vision-to-action transformer consumes one frame per step. Two
//! lightweight policy networks look at the frame plus its optical flow and
//! decide, per step, *how many* visual tokens may reuse their cached
//! key/value rows and *which* ones. The decisions are discrete at inference
//! time and relaxed (Gumbel-Softmax, steep-sigmoid masks with straight-through
//! gradients) during training.
//!
//! Layout:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, FLOP accounting, Adam.
//! - [`scenegen`]: synthetic episodes, block-matching flow, binary/PGM I/O.
//! - [`transformer`]: the backbone, its layer KV cache and partial recompute.
//! - [`policy`]: cached-token selector, cache-ratio predictor, relaxations.
//! - [`training`]: backbone pretraining and the two policy training stages.
//! - [`costmodel`]: closed-form and instrumented FLOP counts.
//! - [`bench`]: evaluation harness, ratio sweeps, wall-clock trials, SVG plots.

pub mod bench;
pub mod config;
pub mod costmodel;
pub mod error;
pub mod numerics;
pub mod par;
pub mod policy;
pub mod rng;
pub mod scenegen;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
