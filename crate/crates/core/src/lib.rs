//! Monotonic alignment search with annealed noise, adversarially trained
//! stochastic duration prediction, attention-augmented coupling flows and a
//! speaker-conditioned text encoder, on a small self-contained autodiff
//! substrate.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, checkpoints and
//! the command line live in the `alignflow` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod duration;
pub mod encoder;
pub mod error;
pub mod flows;
pub mod gradsuite;
pub mod harness;
pub mod numerics;

pub use error::{Error, Result};
