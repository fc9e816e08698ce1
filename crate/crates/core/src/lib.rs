//! PosMLP: vision MLPs whose token mixing is generated from relative positions.

pub mod analysis;
pub mod complexity;
pub mod error;
pub mod gating;
pub mod model;
pub mod param;
pub mod positional;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
