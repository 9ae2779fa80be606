//! Region-aware image restoration driven by a single text instruction.

pub mod checkpoint;
pub mod control;
pub mod data_engine;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod inference;
pub mod instruction;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
