//! Pixel-wise contextual attention networks for salient object detection.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`ops`]: dense tensors with a reverse-mode tape.
//! * [`gradcheck`]: finite-difference certification of every backward rule.
//! * [`picanet`]: global and local pixel-wise attention and the pooling baselines.
//! * [`nn`]: parameter registry and layer helpers.
//! * [`net`]: the U-Net saliency detector with deep supervision.
//! * [`train`], [`metrics`], [`data`]: optimizer, schedule, augmentation,
//!   evaluation metrics and datasets.
//! * [`checkpoint`]: the binary parameter file format.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod ops;
pub mod picanet;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
