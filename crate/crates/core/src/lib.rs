//! Diffusion-based imputation of data that is missing not at random.
//!
//! A conditional X0-prediction diffusion model is pretrained on observed
//! entries, then refined jointly with a missing-pattern recognizer in a
//! hard-EM loop. The recognizer's input gradient guides the reverse chain
//! toward imputations consistent with the observed mask.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod em;
pub mod error;
pub mod eval;
pub mod missing;
pub mod numerics;
pub mod pipeline;
pub mod recognizer;
pub mod seed;

pub use error::{Error, Result};
