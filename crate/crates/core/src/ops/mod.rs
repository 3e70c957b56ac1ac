//! Tensor kernels. Each module exposes plain functions on [`Tensor`]s plus
//! the matching differentiable methods on [`Tape`].
//!
//! [`Tensor`]: crate::tensor::Tensor
//! [`Tape`]: crate::autograd::Tape

pub mod conv;
pub mod elementwise;
pub mod layout;
pub mod linear;
pub mod norm;
pub mod resize;

pub use conv::{conv2d_3x3, depthwise_conv2d};
pub use elementwise::{elementwise, gelu, l1_loss, relu_sq, sigmoid, BinaryOp};
pub use layout::{pixel_shuffle, pixel_unshuffle, transpose_hw};
pub use linear::linear_cw;
pub use norm::{layer_norm_cw, LAYER_NORM_EPS};
pub use resize::bicubic_resize;
