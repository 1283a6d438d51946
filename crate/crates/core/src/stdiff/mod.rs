//! Spatio-temporal conditional latent diffusion.
//!
//! Clips of consecutive frame latents are noised with the forward process and
//! a [`Denoiser3D`] learns to predict that noise from the noisy clip, the
//! timestep and the speech embedding of the clip. Training adds a temporal
//! coherence penalty on successive-frame differences of the one-step clean
//! estimate. Synthesis slides a clip window over the audio, samples every
//! window from seeded noise and stitches the centre frames.

mod loss;
mod model;
mod unet;

pub use loss::{composite_loss, composite_loss_weighted, denoised_estimate, loss_value};
pub use model::{
    clip_starts, stitch_plan, synthesize, train_stdiff, train_step, ClipSet, ClipWindow, StDiffModel,
    SynthesisConfig, TrainConfig, TrainReport, CHECKPOINT_KIND,
};
pub use unet::{Denoiser3D, DenoiserConfig};
