//! Pixel-space diffusion decoder conditioned on a semantic speech vector.
//!
//! The denoiser is the clip U-Net run on one-frame clips of raw pixels, with
//! the 512-d speech vector as its only conditioning row. An image encoder
//! maps ground-truth frames into the same space for the contrastive term.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::losses::{combined_loss_tensor, contrastive_loss_tensor, ContrastiveConfig};
use super::{BaselineTrainConfig, PairedFrames};
use crate::audio_encoder::{AudioEmbedding, SemanticProjection};
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{self, DEVICE};
use crate::schedulers::{ddim_loop, standard_normal_like, NoiseSchedule};
use crate::stdiff::{Denoiser3D, DenoiserConfig};
use crate::vae::{frames_to_tensor, tensor_to_frames};

pub const CHECKPOINT_KIND: &str = "sdiff-baseline";
pub const SEMANTIC_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdiffConfig {
    pub semantic_dim: usize,
    pub audio_rows: usize,
    pub audio_cols: usize,
    /// Denoiser width per level.
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub image_encoder_channels: usize,
    pub contrastive: ContrastiveConfig,
    pub seed: u64,
}

impl Default for SdiffConfig {
    fn default() -> Self {
        Self {
            semantic_dim: SEMANTIC_DIM,
            audio_rows: 12,
            audio_cols: 32,
            channels: vec![32, 64],
            time_dim: 128,
            heads: 4,
            groups: 8,
            image_encoder_channels: 32,
            contrastive: ContrastiveConfig::default(),
            seed: 0,
        }
    }
}

impl SdiffConfig {
    fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            clip_frames: 1,
            channels: self.channels.clone(),
            time_dim: self.time_dim,
            heads: self.heads,
            groups: self.groups,
            audio_rows: 1,
            audio_cols: self.semantic_dim,
            in_channels: 1,
            seed: self.seed,
        }
    }
}

struct ImageEncoder {
    c1: Conv2d,
    c2: Conv2d,
    head: Linear,
}

impl ImageEncoder {
    fn new(ch: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        Ok(Self {
            c1: candle_nn::conv2d(1, ch, 3, cfg, vb.pp("c1"))?,
            c2: candle_nn::conv2d(ch, 2 * ch, 3, cfg, vb.pp("c2"))?,
            head: candle_nn::linear(2 * ch, out, vb.pp("head"))?,
        })
    }

    /// `(B, 1, H, W)` → `(B, out)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.c2.forward(&self.c1.forward(x)?.silu()?)?.silu()?;
        Ok(self.head.forward(&x.mean((2, 3))?)?)
    }
}

pub struct SdiffModel {
    config: SdiffConfig,
    varmap: VarMap,
    speech: SemanticProjection,
    image: ImageEncoder,
    denoiser: Denoiser3D,
    trained_steps: usize,
    decoder_calls: AtomicUsize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdiffTrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Pixels in `[0, 1]` ↔ diffusion space `[−1, 1]`.
fn to_signed(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

impl SdiffModel {
    pub fn new(config: SdiffConfig) -> Result<Self> {
        config.contrastive.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE);
        let speech = SemanticProjection::new(config.audio_cols, config.semantic_dim, vb.pp("speech"))?;
        let image = ImageEncoder::new(config.image_encoder_channels, config.semantic_dim, vb.pp("image"))?;
        let denoiser = Denoiser3D::new(config.denoiser(), vb.pp("denoiser"))?;
        nn::seeded_init(&varmap, config.seed)?;
        Ok(Self {
            config,
            varmap,
            speech,
            image,
            denoiser,
            trained_steps: 0,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &SdiffConfig {
        &self.config
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    /// Number of single-frame decodes run so far.
    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    fn check_audio(&self, audio: &Tensor) -> Result<()> {
        let (_, r, c) = audio.dims3()?;
        if (r, c) != (self.config.audio_rows, self.config.audio_cols) {
            return Err(Error::shape(
                format!("{}x{} speech embeddings", self.config.audio_rows, self.config.audio_cols),
                format!("{r}x{c}"),
            ));
        }
        Ok(())
    }

    /// Semantic speech vectors `(B, semantic_dim)`.
    pub fn speech_vectors(&self, audio: &Tensor) -> Result<Tensor> {
        self.check_audio(audio)?;
        self.speech.forward(audio)
    }

    /// Semantic image vectors `(B, semantic_dim)` for `(B, 1, H, W)` frames.
    pub fn image_vectors(&self, frames: &Tensor) -> Result<Tensor> {
        self.image.forward(frames)
    }

    fn predict_noise(&self, x: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let out = self
            .denoiser
            .forward(&x.reshape((b, 1, c, h, w))?, t, &cond.unsqueeze(1)?)?;
        Ok(out.reshape((b, c, h, w))?)
    }

    /// Deterministic implicit sampling of one frame. The starting noise is
    /// derived from the conditioning, so equal inputs give equal frames
    /// regardless of position in a sequence.
    pub fn decode_frame(
        &self,
        embedding: &AudioEmbedding,
        resolution: (usize, usize),
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<Frame> {
        let audio = embedding.to_tensor()?.unsqueeze(0)?;
        let cond = self.speech_vectors(&audio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(embedding, seed));
        let like = Tensor::zeros((1, 1, resolution.0, resolution.1), DType::F32, &DEVICE)?;
        let x_t = standard_normal_like(&like, &mut rng)?;
        let x0 = ddim_loop(x_t, sched, |x, t| self.predict_noise(x, &[t], &cond))?;
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        let pixels = ((x0 + 1.0)? * 0.5)?;
        Ok(tensor_to_frames(&pixels)?.remove(0))
    }

    /// One independent decode per embedding.
    pub fn generate(
        &self,
        embeddings: &[AudioEmbedding],
        resolution: (usize, usize),
        sched: &NoiseSchedule,
        seed: u64,
    ) -> Result<Vec<Frame>> {
        if self.trained_steps == 0 {
            log::warn!("sampling from an untrained spatial diffusion baseline");
        }
        embeddings
            .iter()
            .map(|e| self.decode_frame(e, resolution, sched, seed))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, &self.config)?
            .with_extra("trained_steps", self.trained_steps)
            .with_extra("semantic_dim", self.config.semantic_dim);
        checkpoint::save(path, &meta, &[("sdiff", &self.varmap)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.meta.config()?)?;
        ck.restore("sdiff", &model.varmap)?;
        model.trained_steps = ck.meta.extra_parsed("trained_steps")?;
        Ok(model)
    }
}

fn noise_seed(embedding: &AudioEmbedding, seed: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for v in &embedding.data {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Frame-by-frame training: noise-prediction MSE weighted by `λ1` plus the
/// all-positive contrastive term between image and speech vectors weighted
/// by `λ2`.
pub fn train_sdiff_baseline(
    data: &PairedFrames,
    model: &mut SdiffModel,
    sched: &NoiseSchedule,
    config: &BaselineTrainConfig,
) -> Result<SdiffTrainReport> {
    config.validate()?;
    let (h, w) = data.validate()?;
    model.config.denoiser().check_spatial(h, w)?;
    let mut opt = nn::adam(&model.varmap, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = SdiffTrainReport {
        epoch_losses: Vec::new(),
        steps: 0,
    };
    let cc = model.config.contrastive;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let frames: Vec<Frame> = batch.iter().map(|&i| data.frames[i].clone()).collect();
            let embs: Vec<&AudioEmbedding> = batch.iter().map(|&i| &data.embeddings[i]).collect();
            let pixels = frames_to_tensor(&frames)?;
            let x0 = to_signed(&pixels)?;
            let audio = AudioEmbedding::stack(&embs)?;
            let speech = model.speech_vectors(&audio)?;

            let b = batch.len();
            let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.train_steps())).collect();
            let eps = standard_normal_like(&x0, &mut rng)?;
            let abar: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect();
            let col = |f: fn(f64) -> f64| -> Result<Tensor> {
                let v: Vec<f32> = abar.iter().map(|&a| f(a) as f32).collect();
                Ok(Tensor::from_vec(v, (b, 1, 1, 1), &DEVICE)?)
            };
            let x_t = (x0.broadcast_mul(&col(f64::sqrt)?)? + eps.broadcast_mul(&col(|a| (1.0 - a).sqrt())?)?)?;
            let pred = model.predict_noise(&x_t, &ts, &speech)?;
            let recon = nn::mse(&pred, &eps)?;
            let image = model.image_vectors(&pixels)?;
            let contrastive = contrastive_loss_tensor(&image, &speech, &vec![true; b], cc.margin)?;
            let loss = combined_loss_tensor(&recon, &contrastive, cc.lambda1, cc.lambda2)?;
            total += nn::backward_step(&mut opt, &loss, model.trained_steps, "sdiff")? * b as f64;
            model.trained_steps += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(total / data.len() as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedulers::ScheduleConfig;

    fn tiny() -> SdiffConfig {
        SdiffConfig {
            semantic_dim: 16,
            audio_rows: 2,
            audio_cols: 4,
            channels: vec![8, 16],
            time_dim: 16,
            heads: 2,
            groups: 4,
            image_encoder_channels: 4,
            ..SdiffConfig::default()
        }
    }

    fn emb(seed: u64) -> AudioEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioEmbedding {
            rows: 2,
            cols: 4,
            data: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
            source_backend: "test".into(),
        }
    }

    fn sched() -> NoiseSchedule {
        ScheduleConfig {
            train_steps: 100,
            inference_steps: 5,
            ..ScheduleConfig::default()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn implicit_sampling_is_deterministic_and_frame_wise() {
        let m = SdiffModel::new(tiny()).unwrap();
        let embs: Vec<AudioEmbedding> = (0..4).map(emb).collect();
        let s = sched();
        let a = m.generate(&embs, (8, 8), &s, 3).unwrap();
        let b = m.generate(&embs, (8, 8), &s, 3).unwrap();
        assert_eq!(a, b);
        let mut rev = embs.clone();
        rev.reverse();
        let mut c = m.generate(&rev, (8, 8), &s, 3).unwrap();
        c.reverse();
        assert_eq!(a, c);
        assert_eq!(m.decoder_calls(), 12);
    }

    #[test]
    fn ten_frames_make_ten_decoder_calls() {
        let m = SdiffModel::new(tiny()).unwrap();
        let embs: Vec<AudioEmbedding> = (0..10).map(emb).collect();
        m.generate(&embs, (8, 8), &sched(), 0).unwrap();
        assert_eq!(m.decoder_calls(), 10);
    }

    #[test]
    fn training_runs_and_checkpoints() {
        let mut m = SdiffModel::new(tiny()).unwrap();
        let mut d = PairedFrames::default();
        for i in 0..4 {
            d.push_video(&[Frame::filled(8, 8, 0.1 * i as f32)], &[emb(i)]).unwrap();
        }
        let r = train_sdiff_baseline(&d, &mut m, &sched(), &BaselineTrainConfig { epochs: 2, batch_size: 2, ..BaselineTrainConfig::default() }).unwrap();
        assert_eq!(r.steps, 4);
        assert!(r.epoch_losses.iter().all(|v| v.is_finite()));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sdiff.safetensors");
        m.save(&p).unwrap();
        let back = SdiffModel::load(&p).unwrap();
        assert_eq!(back.trained_steps(), 4);
        let s = sched();
        assert_eq!(
            back.decode_frame(&emb(0), (8, 8), &s, 1).unwrap(),
            m.decode_frame(&emb(0), (8, 8), &s, 1).unwrap()
        );
    }
}
