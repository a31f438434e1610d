//! Expandable residual approximation for teacher–student feature
//! distillation.
//!
//! A student encoder's features are projected into the teacher's feature
//! space and then refined by a cascade of small residual branches, each one
//! regressing what the previous approximations left over. Each refined
//! approximation is also scored by the frozen teacher classifier. The crate
//! carries its own reverse-mode autodiff so every objective can be checked
//! against finite differences.

pub mod autodiff;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradsuite;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
