//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::{
    compare_gradients, grad_check, numeric_gradient, vjp_wrt_input, GradCheckReport, FD_STEP,
    REL_ERROR_FLOOR,
};
pub use tape::{sinusoidal_embedding, Gradients, OpStats, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
