//! Spatio-temporal 3D convolutional networks for video action recognition.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: 5-D tensors, layer primitives and reverse-mode autodiff;
//! * [`nn`]: block and network builders for the residual families
//!   (ResNet, pre-activation ResNet, Wide ResNet, ResNeXt, DenseNet);
//! * [`data`]: manifests, PPM frames, clip sampling and augmentation;
//! * [`train`]: SGD, the plateau schedule, training loops and evaluation;
//! * [`io`]: checkpoints and run configuration files.

pub mod data;
pub mod error;
pub mod io;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};
