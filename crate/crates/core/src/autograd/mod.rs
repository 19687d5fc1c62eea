//! Reverse-mode automatic differentiation over dense 64-bit tensors.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, ParamCheck};
pub use tape::{Fault, Gradients, Tape, Var, DIST_EPS, LAYER_NORM_EPS, NORM_EPS};
pub use tensor::Tensor;
