//! Current-action anticipation from one second of video and next-action
//! forecasting, with a per-video, per-second recurrent state memory.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors, reverse-mode differentiation, Adam.
//! - [`datagen`]: synthetic activity grammars, videos, dataset files.
//! - [`sampler`]: one-second clip sampling and batch assembly.
//! - [`ism`]: the internal state memory.
//! - [`protonet`]: prototypical activity embedder.
//! - [`model`]: the network itself.
//! - [`trainer`]: losses, dynamic loss weights, training loop, checkpoints.
//! - [`evaluator`]: metrics and evaluation protocols.
//! - [`gradcheck`]: finite-difference verification suite.
//! - [`config`]: run configuration.

pub mod autodiff;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod ism;
pub mod model;
pub mod protonet;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{AfnError, Result};
pub use tensor::{Real, Tensor};
