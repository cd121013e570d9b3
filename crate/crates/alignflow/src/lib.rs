//! Command line, checkpoint container and file formats around
//! `alignflow_core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod io;
pub mod pgm;

pub use error::{Error, Result};
