//! Payload protocol: latents are signed, FEC-coded, framed with metadata,
//! and laid out as a 2D bit grid with a locator marker and a border.

pub mod bch;
pub mod capacity;
pub mod gf256;
pub mod grid;
pub mod keys;
pub mod marker;
pub mod metadata;
