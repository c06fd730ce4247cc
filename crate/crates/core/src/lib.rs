//! Attention sharing for multi-modal diffusion transformers.
//!
//! A reference image stream lends its image-token keys and values to target
//! streams so the targets pick up its style. Reference positions are shifted
//! beside the target grid to avoid rotary position collisions, only image
//! tokens are shared, reference keys are scaled by `lambda`, and sharing is
//! limited to a chosen layer set. Everything runs on a small seeded toy
//! MM-DiT so the mechanism can be tested exactly.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod ditsim;
pub mod error;
pub mod position;
pub mod refcache;
pub mod selftest;
pub mod sharing;
pub mod tensor;

pub use error::{Error, Result};
