//! Multi-headed self-attention with per-head mechanism choice, inter-head
//! diversity losses, and exact reverse-mode gradients.
//!
//! The crate is `no_std`-compatible (requires `alloc`); file formats, CLI
//! and reporting live in the companion `headdiv` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod attention;
pub mod diversity;
pub mod error;
pub mod gradcheck;
pub mod math;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod task;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
