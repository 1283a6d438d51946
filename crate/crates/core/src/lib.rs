//! Speech-to-video latent diffusion for vocal tract imaging.
//!
//! The pipeline aligns speech with video frames ([`align`]), turns speech into a
//! conditioning matrix ([`audio_encoder`]), compresses frames into an 8x
//! downsampled 4-channel latent space ([`vae`]), and trains a spatio-temporal
//! conditional denoiser over short latent clips ([`stdiff`]) driven by the
//! DDPM/PNDM samplers in [`schedulers`]. [`baselines`] holds the two frame-wise
//! comparison systems, [`metrics`] the evaluation metrics, and [`harness`] the
//! synthetic data generator, dataset handling, configuration and experiments.

pub mod align;
pub mod audio_encoder;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod frame;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod schedulers;
pub mod stdiff;
pub mod vae;

pub use error::{Error, Result};
pub use frame::Frame;
