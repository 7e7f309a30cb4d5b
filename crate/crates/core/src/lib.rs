//! Contrastive domain adaptation from scratch.
//!
//! The crate is `no_std` (with `alloc`) and holds every pure part of the
//! method: a small reverse-mode autodiff engine, the digit data generators and
//! augmentations, the encoder / projection head, the contrastive, false-negative
//! removal and MMD objectives, and the pretraining / linear-evaluation loop.
//! File formats, the CLI and wall-clock timing live in the `cda` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
