//! Context-aware recognition transformer on a small reverse-mode autodiff
//! core, with a procedural out-of-context scene generator, training engine
//! and condition-stratified evaluation.

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
