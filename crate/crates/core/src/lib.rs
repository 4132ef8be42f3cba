//! Point-cloud learning toolkit built around densely connected point
//! convolutions.
//!
//! Modules, bottom-up: [`tensor`] (dense fp64 tensors and reverse-mode
//! autodiff), [`geometry`] (sampling and neighborhoods), [`layers`],
//! [`networks`] (builders and cost accounting), [`training`], [`data`].

pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod layers;
pub mod networks;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
