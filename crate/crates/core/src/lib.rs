//! Memory-augmented conditioning pipeline for decoding brain-signal vectors
//! into short clips.
//!
//! Stage 1 trains a small transformer encoder so that its global token aligns
//! with text, image and action embeddings and predicts coarse categories.
//! Stage 2 routes the encoder's token sequence over a tri-modal memory pool,
//! fuses the retrieved memories through gated cross-attention, and trains a
//! toy diffusion denoiser conditioned on the fused tokens.
//!
//! Everything runs on a seeded synthetic generator whose ground-truth latent
//! links all modalities, so every stage can be checked quantitatively.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod brain_model;
pub mod checks;
pub mod config;
pub mod datasynth;
pub mod decoder;
pub mod error;
pub mod evalsuite;
pub mod fusion;
pub mod memory;
pub mod numerics;
pub mod objectives;
pub mod persistence;
pub mod pipeline;

pub use error::{Error, FormatError, Result};
