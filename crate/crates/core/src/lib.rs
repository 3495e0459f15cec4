//! Visual representation alignment for a miniature vision-language-action
//! transformer: the model, a frozen teacher encoder, projector and loss zoos,
//! a procedural pick-and-place task generator, training loops and probes.

pub mod alignment;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod taskgen;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{GradTape, ParamStore, Prng, Tensor, Var};
