//! Dense tensors, forward kernels and reverse-mode differentiation.

pub mod gradcheck;
pub mod ops;
pub mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport, REL_FLOOR};
pub use ops::{
    concat_features, conv1d_depthwise, matmul, reverse_time, silu, softmax_rows, softplus,
};
pub use tape::{grad, Backward, Tape, Var};
pub use tensor::{DType, Real, Tensor};
