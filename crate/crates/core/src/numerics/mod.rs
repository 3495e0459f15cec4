//! Deterministic `f64` tensor math, reverse-mode differentiation and a
//! finite-difference oracle.

mod gradcheck;
pub mod linalg;
mod params;
mod prng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_params};
pub use params::{Bindings, ParamStore};
pub use prng::{fnv1a, mix, Prng};
pub use tape::{GradTape, Gradients, Var};
pub use tensor::{layer_norm, matmul, softmax_rows, Tensor, LAYER_NORM_EPS};
pub(crate) use tensor::{read_u32, read_u64};
