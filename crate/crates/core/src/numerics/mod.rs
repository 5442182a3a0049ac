//! Dense tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_per_tensor, finite_diff_check, numeric_gradients,
    tensor_relative_errors, value_and_grad, REL_FLOOR,
};
pub(crate) use tape::pairwise_hinge;
pub use tape::{
    gelu, log_sum_exp, mean_over_axis, sigmoid, softmax, softmax_in_place, Gradients, Tape, Var,
};
pub use tensor::Tensor;
