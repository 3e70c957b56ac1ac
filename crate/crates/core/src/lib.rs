//! OmniRWKVSR single-image super-resolution on a small CPU autodiff engine.

pub mod autograd;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod init;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod shifts;
pub mod tensor;
pub mod toydata;
pub mod training;
pub mod wkv6;

pub use autograd::{fd_grad_check, fd_grad_check_params, Param, ParamId, ParamStore, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
