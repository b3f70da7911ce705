//! Reverse-mode automatic differentiation over dense f64 tensors, with the
//! convolution, normalization, pooling and loss primitives needed by the
//! segmentation networks in `motseg-core`.

mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod par;
mod tensor;

pub use error::{Error, Result};
pub use graph::{sigmoid, BnObservation, Gradients, Graph, Var, BN_EPS, BN_MOMENTUM, IGNORE_LABEL};
pub use tensor::Tensor;
