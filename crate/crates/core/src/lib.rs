//! Joint pooled and dense self-supervised learning on synthetic video.
//!
//! The crate trains a small convolutional encoder on frame pairs with exact
//! ground-truth optical flow: a dense objective makes feature maps equivariant
//! to flow warping, while a pooled objective matches flow-aligned subcrop
//! pairs through average pooling. Everything — tensors, reverse-mode
//! differentiation, rendering, training — is implemented here on the CPU.
//!
//! Start with [`tensor::Tensor4D`] and [`tensor::tape::Tape`], or see the
//! guide under `book/` for a walkthrough.

pub mod analysis;
pub mod cropping;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor4D;
