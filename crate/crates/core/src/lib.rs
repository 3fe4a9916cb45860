//! Trainable robust image watermarking toolkit.
//!
//! The pipeline embeds a short binary message into an image and recovers
//! it after the image has been degraded. Robustness comes from three
//! places:
//!
//! 1. a channel codec that expands the message into a redundant
//!    representation before embedding ([`codec`]);
//! 2. a watermark encoder/decoder pair trained adversarially against
//!    learnable attack networks — spatial CNN and Transformer backbones
//!    plus blockwise-DCT frequency-domain variants ([`watermark`],
//!    [`attack`]) — optionally combined by an ensemble strategy
//!    ([`ensemble`]);
//! 3. a distortion stress-test harness ([`distortion`], [`evalrun`]) that
//!    reports bit accuracy and image quality (PSNR / SSIM) under a fixed
//!    panel of evaluation-time degradations.
//!
//! Everything is 64-bit and deterministic given the run seed: training
//! replays checkpoint-exactly and two runs with equal configs produce
//! equal reports.

pub mod attack;
pub mod checkpoint;
pub mod codec;
pub mod color;
pub mod config;
pub mod dataset;
pub mod dct;
pub mod distortion;
pub mod ensemble;
pub mod error;
pub mod evalrun;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod watermark;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
