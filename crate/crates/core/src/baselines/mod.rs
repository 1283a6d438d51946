//! Frame-wise comparison systems.
//!
//! [`vq`] translates speech to frames through a 32-entry codebook and an
//! adversarially trained decoder. [`sdiff`] is a pixel-space diffusion
//! decoder conditioned on a 512-d speech vector that is pulled toward an
//! image embedding by a contrastive term. Both work one frame at a time.

pub mod losses;
pub mod quantize;
pub mod sdiff;
pub mod vq;

pub use losses::{
    combined_loss, combined_loss_tensor, contrastive_loss, contrastive_loss_tensor, reconst_loss,
    reconst_loss_tensor, ContrastiveConfig, SemanticPair,
};
pub use quantize::{quantize, quantize_tensor, Codebook, CODEBOOK_SIZE, CODE_DIM};
pub use sdiff::{train_sdiff_baseline, SdiffConfig, SdiffModel};
pub use vq::{train_vq_baseline, VqConfig, VqModel};

use serde::{Deserialize, Serialize};

use crate::audio_encoder::AudioEmbedding;
use crate::error::{Error, Result};
use crate::frame::{common_shape, Frame};

/// Frames with the speech embedding of each frame's context window.
#[derive(Debug, Clone, Default)]
pub struct PairedFrames {
    pub frames: Vec<Frame>,
    pub embeddings: Vec<AudioEmbedding>,
}

impl PairedFrames {
    pub fn push_video(&mut self, frames: &[Frame], embeddings: &[AudioEmbedding]) -> Result<()> {
        if frames.len() > embeddings.len() {
            return Err(Error::shape(format!("{} embeddings", frames.len()), embeddings.len()));
        }
        self.frames.extend_from_slice(frames);
        self.embeddings.extend_from_slice(&embeddings[..frames.len()]);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub(crate) fn validate(&self) -> Result<(usize, usize)> {
        if self.frames.is_empty() {
            return Err(Error::Dataset("no training frames".into()));
        }
        if self.frames.len() != self.embeddings.len() {
            return Err(Error::shape(self.frames.len(), self.embeddings.len()));
        }
        common_shape(&self.frames)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl BaselineTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("baseline batch_size and learning_rate must be positive".into()));
        }
        Ok(())
    }
}
