//! Dense numerics shared by every other module.

mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use rng::Rng;
pub use tensor::{
    argmax, l2_normalize_rows, log_softmax, matmul, norm as tensor_norm, softmax, Tensor2D,
};

/// Default floor for row normalization.
pub const NORM_EPS: f64 = 1e-12;
