//! FPAN image super-resolution: a convolutional upscaler with two-stage
//! feedback conv stacks and multi-scale attention pooling, built on a small
//! self-contained autodiff engine.
//!
//! Layout:
//! - [`tensor`], [`autodiff`]: rank-4 tensors and the reverse-mode tape.
//! - [`nn`]: convolution layers, initialization, the parameter store.
//! - [`model`]: feedback structure, pyramid non-local attention, full network.
//! - [`training`]: L1 loss, Adam, LR schedule, patch sampling, train loop.
//! - [`imaging`]: PNG I/O, YCbCr, bicubic resampling, degradations, self-ensemble.
//! - [`metrics`]: Y-channel PSNR/SSIM and parameter/FLOP accounting.
//! - [`checkpoint`], [`config`], [`cli`]: persistence and the command-line front end.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{FpanError, Result};
pub use tensor::{Element, Tensor4};
