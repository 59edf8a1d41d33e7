//! Unsupervised monocular disparity estimation with learned ambiguity masks.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autograd`], [`gradcheck`]: a small dense
//!   4-D tensor engine with reverse-mode differentiation.
//! * [`warp`]: backward warping, dis-occlusion masks and the masked view
//!   reconstruction.
//! * [`network`]: the residual encoder-decoder with rectangular fusion and
//!   domain-transform blocks, plus checkpoint I/O.
//! * [`losses`]: the five-term multiscale training objective.
//! * [`eval`]: KITTI-style metrics, warp rmse and flip post-processing.
//! * [`pipeline`]: data loading, augmentation, Adam, training and inference.

pub mod autograd;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod kv;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod tensor;
pub mod warp;

pub use autograd::{Axis, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
