//! Dense arrays, forward kernels, reverse-mode gradients and finite
//! difference checking.

mod array;
pub mod gradcheck;
pub mod io;
pub mod kernels;
mod param;
mod rng;
mod tape;

pub use array::{DType, NDArray, Scalar};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use kernels::{gelu, layer_norm, matmul, pointwise_conv, softmax_rows};
pub use param::{Param, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
