//! Dense tensors and a small reverse-mode autodiff tape.
//!
//! The tape covers exactly the operations needed by convolutional
//! segmentation networks with patch attention: grouped convolution,
//! bilinear resizing, batch normalization, dense layers, batched matmul,
//! softmax and index permutations.

pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use kernels::ConvGeometry;
pub use scalar::Scalar;
pub use tape::{BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;
