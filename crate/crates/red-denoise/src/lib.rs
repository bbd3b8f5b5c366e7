//! Denoising of simulated low-dose CT images with a residual
//! encoder-decoder network trained under a joint pixel + feature-space loss.
//!
//! The crate is self-contained: it ships its own tensor/autodiff engine,
//! a parallel-beam CT simulator (projection, photon noise, filtered back
//! projection), the denoising model, a fixed feature extractor for the
//! perceptual term, SSIM/RMSE/PSNR evaluation, and a patch-based trainer.

pub mod ct_sim;
pub mod error;
pub mod io;
pub mod metrics;
pub mod perceptual;
pub mod red_model;
pub mod tensor;
pub mod training;

pub use ct_sim::{Phantom, Sinogram};
pub use error::{Error, Result};
pub use perceptual::FeatureExtractor;
pub use red_model::{RedConfig, RedModel};
pub use tensor::{grad_check, Tape, Tensor, TensorId};
pub use training::TrainConfig;
