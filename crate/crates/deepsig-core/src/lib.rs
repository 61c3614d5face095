//! Self-verifying image signatures: a compressed latent of the image is
//! signed and hidden back inside the image as an invisible watermark, so a
//! verifier can both authenticate the pixels and localize what changed.

pub mod autodiff;
pub mod bits;
pub mod content;
pub mod eval;
pub mod imageops;
pub mod nn;
pub mod num;
pub mod payload;
pub mod verify;
pub mod watermark;

/// Scalar used by the shipped models and pipelines.
pub type Real = f32;
