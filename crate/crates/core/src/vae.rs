//! Convolutional frame autoencoder with an 8x spatial reduction to 4 latent
//! channels.
//!
//! Three stride-2 stages shrink each axis by 8. The encoder emits a diagonal
//! Gaussian posterior; inference uses its mean. Decoded frames pass through a
//! sigmoid and are clamped to `[0, 1]`.

use std::path::Path;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::frame::{common_shape, Frame};
use crate::nn::{self, DEVICE};
use crate::schedulers::standard_normal_like;

pub const DOWNSAMPLE: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
pub const CHECKPOINT_KIND: &str = "vae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Width of the full-resolution stage followed by the three downsampling
    /// stages.
    pub channels: [usize; 4],
    pub kl_weight: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 96, 128],
            kl_weight: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Per-frame latents, channels last: `frame_count × h × w × 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo {
    pub latents: Vec<f32>,
    pub frame_count: usize,
    pub latent_size: (usize, usize),
    pub source_resolution: (usize, usize),
}

impl LatentVideo {
    pub fn frame_len(&self) -> usize {
        self.latent_size.0 * self.latent_size.1 * LATENT_CHANNELS
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.frame_len();
        &self.latents[i * n..(i + 1) * n]
    }

    /// `(F, 4, h, w)` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (h, w) = self.latent_size;
        let t = Tensor::from_slice(
            &self.latents,
            (self.frame_count, h, w, LATENT_CHANNELS),
            &DEVICE,
        )?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Inverse of [`LatentVideo::to_tensor`].
    pub fn from_tensor(t: &Tensor, source_resolution: (usize, usize)) -> Result<Self> {
        let (f, c, h, w) = t.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::shape(format!("{LATENT_CHANNELS} channels"), c));
        }
        let latents = t
            .permute((0, 2, 3, 1))?
            .flatten_all()?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        if latents.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latents".into()));
        }
        Ok(Self {
            latents,
            frame_count: f,
            latent_size: (h, w),
            source_resolution,
        })
    }
}

fn conv3(i: usize, o: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(i, o, 3, cfg, vb)
}

struct Stage {
    a: Conv2d,
    b: Conv2d,
}

impl Stage {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.a.forward(x)?.silu()?;
        let h = self.b.forward(&x)?.silu()?;
        x + h
    }
}

pub struct VaeModel {
    config: VaeConfig,
    varmap: VarMap,
    enc_in: Conv2d,
    enc_stages: Vec<Stage>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_stages: Vec<Stage>,
    dec_out: Conv2d,
    trained_steps: usize,
}

impl std::fmt::Debug for VaeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VaeModel")
            .field("config", &self.config)
            .field("trained_steps", &self.trained_steps)
            .finish()
    }
}

impl VaeModel {
    pub fn new(config: VaeConfig) -> Result<Self> {
        if config.channels.contains(&0) {
            return Err(Error::Config("vae channels must be positive".into()));
        }
        if !(config.kl_weight >= 0.0) {
            return Err(Error::Config("vae kl_weight must be >= 0".into()));
        }
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &DEVICE);
        let ch = config.channels;
        let enc = vb.pp("encoder");
        let enc_in = conv3(1, ch[0], 1, enc.pp("in"))?;
        let enc_stages = (0..3)
            .map(|i| {
                let s = enc.pp(format!("stage{i}"));
                Ok(Stage {
                    a: conv3(ch[i], ch[i + 1], 2, s.pp("down"))?,
                    b: conv3(ch[i + 1], ch[i + 1], 1, s.pp("conv"))?,
                })
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let enc_out = candle_nn::conv2d(ch[3], 2 * LATENT_CHANNELS, 1, Default::default(), enc.pp("out"))?;
        let dec = vb.pp("decoder");
        let dec_in = conv3(LATENT_CHANNELS, ch[3], 1, dec.pp("in"))?;
        let dec_stages = (0..3)
            .rev()
            .map(|i| {
                let s = dec.pp(format!("stage{i}"));
                Ok(Stage {
                    a: conv3(ch[i + 1], ch[i], 1, s.pp("up"))?,
                    b: conv3(ch[i], ch[i], 1, s.pp("conv"))?,
                })
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let dec_out = conv3(ch[0], 1, 1, dec.pp("out"))?;
        nn::seeded_init(&varmap, config.seed)?;
        Ok(Self {
            config,
            varmap,
            enc_in,
            enc_stages,
            enc_out,
            dec_in,
            dec_stages,
            dec_out,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    /// `(B, 1, H, W)` → posterior `(mean, logvar)`, each `(B, 4, H/8, W/8)`.
    pub fn posterior(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        check_divisible(h, w)?;
        let mut x = self.enc_in.forward(x)?.silu()?;
        for s in &self.enc_stages {
            x = s.forward(&x)?;
        }
        let out = self.enc_out.forward(&x)?;
        let mean = out.narrow(1, 0, LATENT_CHANNELS)?;
        let logvar = out.narrow(1, LATENT_CHANNELS, LATENT_CHANNELS)?.clamp(-30.0, 20.0)?;
        Ok((mean, logvar))
    }

    /// `(B, 4, h, w)` → `(B, 1, 8h, 8w)` in `(0, 1)`.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.dec_in.forward(z)?.silu()?;
        for s in &self.dec_stages {
            let (_, _, h, w) = x.dims4()?;
            x = s.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.dec_out.forward(&x)?)?)
    }

    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.posterior(x)?.0)
    }

    /// Mean latent of one frame, channels last `(H/8) × (W/8) × 4`.
    pub fn encode_frame(&self, frame: &Frame) -> Result<Vec<f32>> {
        Ok(self.encode_video(std::slice::from_ref(frame))?.latents)
    }

    pub fn encode_video(&self, frames: &[Frame]) -> Result<LatentVideo> {
        let (h, w) = common_shape(frames)?;
        check_divisible(h, w)?;
        let x = frames_to_tensor(frames)?;
        let z = self.encode_tensor(&x)?;
        LatentVideo::from_tensor(&z, (h, w))
    }

    pub fn decode(&self, latents: &LatentVideo) -> Result<Vec<Frame>> {
        let (h, w) = latents.source_resolution;
        if (latents.latent_size.0 * DOWNSAMPLE, latents.latent_size.1 * DOWNSAMPLE) != (h, w) {
            return Err(Error::shape(
                format!("{}x{} latents", h / DOWNSAMPLE, w / DOWNSAMPLE),
                format!("{}x{}", latents.latent_size.0, latents.latent_size.1),
            ));
        }
        if latents.latents.len() != latents.frame_count * latents.frame_len() {
            return Err(Error::shape(
                latents.frame_count * latents.frame_len(),
                latents.latents.len(),
            ));
        }
        tensor_to_frames(&self.decode_tensor(&latents.to_tensor()?)?)
    }

    /// Reconstruction + KL loss on a `(B, 1, H, W)` batch.
    fn loss(&self, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let (mean, logvar) = self.posterior(x)?;
        let eps = standard_normal_like(&mean, rng)?;
        let z = (&mean + (eps * (&logvar * 0.5)?.exp()?)?)?;
        let recon = nn::mse(&self.decode_tensor(&z)?, x)?;
        // KL(q || N(0, I)) averaged over latent elements.
        let kl = ((mean.sqr()? + logvar.exp()? - &logvar)? - 1.0)?.mean_all()? * 0.5;
        Ok((recon + (kl? * self.config.kl_weight)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, &self.config)?
            .with_extra("trained_steps", self.trained_steps)
            .with_extra("downsample", DOWNSAMPLE)
            .with_extra("latent_channels", LATENT_CHANNELS);
        checkpoint::save(path, &meta, &[("vae", &self.varmap)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.meta.config()?)?;
        ck.restore("vae", &model.varmap)?;
        model.trained_steps = ck.meta.extra_parsed("trained_steps")?;
        Ok(model)
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(DOWNSAMPLE) || !w.is_multiple_of(DOWNSAMPLE) {
        return Err(Error::InvalidInput(format!(
            "resolution {h}x{w} is not divisible by {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

/// Frames → `(B, 1, H, W)`.
pub fn frames_to_tensor(frames: &[Frame]) -> Result<Tensor> {
    let (h, w) = common_shape(frames)?;
    let mut data = Vec::with_capacity(frames.len() * h * w);
    for f in frames {
        data.extend_from_slice(&f.data);
    }
    Ok(Tensor::from_vec(data, (frames.len(), 1, h, w), &DEVICE)?)
}

/// `(B, 1, H, W)` → frames clamped to `[0, 1]`.
pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>> {
    let (b, _, h, w) = t.dims4()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoded frames".into()));
    }
    Ok(flat
        .chunks_exact(h * w)
        .take(b)
        .map(|c| Frame {
            height: h,
            width: w,
            data: c.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Trains `model` in place on a set of frames.
pub fn train_vae(frames: &[Frame], model: &mut VaeModel, config: &VaeTrainConfig) -> Result<TrainReport> {
    if frames.is_empty() {
        return Err(Error::Dataset("no frames to train the autoencoder on".into()));
    }
    let (h, w) = common_shape(frames)?;
    check_divisible(h, w)?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::Config("vae batch_size and learning_rate must be positive".into()));
    }
    let mut opt = nn::adam(&model.varmap, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
    };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let picked: Vec<Frame> = batch.iter().map(|&i| frames[i].clone()).collect();
            let x = frames_to_tensor(&picked)?;
            let loss = model.loss(&x, &mut rng)?;
            let value = nn::backward_step(&mut opt, &loss, model.trained_steps, "vae")?;
            model.trained_steps += 1;
            report.steps += 1;
            total += value * batch.len() as f64;
        }
        report.epoch_losses.push(total / frames.len() as f64);
    }
    Ok(report)
}

/// Mean per-frame reconstruction MSE through the posterior mean.
pub fn reconstruction_mse(model: &VaeModel, frames: &[Frame]) -> Result<f64> {
    let decoded = model.decode(&model.encode_video(frames)?)?;
    let mut total = 0.0;
    for (a, b) in decoded.iter().zip(frames) {
        let se: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum();
        total += se / a.data.len() as f64;
    }
    Ok(total / frames.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VaeModel {
        VaeModel::new(VaeConfig {
            channels: [4, 8, 8, 8],
            ..VaeConfig::default()
        })
        .unwrap()
    }

    fn disc(h: usize, w: usize, r: f32) -> Frame {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f32 - h as f32 / 2.0, (i % w) as f32 - w as f32 / 2.0);
                if (x * x + y * y).sqrt() < r { 0.9 } else { 0.1 }
            })
            .collect();
        Frame::new(h, w, data).unwrap()
    }

    #[test]
    fn latent_geometry() {
        let m = small();
        assert_eq!(m.encode_frame(&Frame::filled(128, 128, 0.5)).unwrap().len(), 16 * 16 * 4);
        assert_eq!(m.encode_frame(&Frame::filled(8, 8, 0.5)).unwrap().len(), 4);
        assert!(matches!(
            m.encode_frame(&Frame::filled(12, 16, 0.5)),
            Err(Error::InvalidInput(_))
        ));
        let v = m.encode_video(&vec![Frame::filled(16, 24, 0.3); 26]).unwrap();
        assert_eq!((v.frame_count, v.latent_size), (26, (2, 3)));
        let out = m.decode(&v).unwrap();
        assert_eq!(out.len(), 26);
        assert_eq!(out[0].shape(), (16, 24));
    }

    #[test]
    fn encode_video_is_framewise() {
        let m = small();
        let frames: Vec<Frame> = (0..4).map(|i| disc(16, 16, 2.0 + i as f32)).collect();
        let v = m.encode_video(&frames).unwrap();
        assert_eq!(v.frame(0), m.encode_frame(&frames[0]).unwrap().as_slice());
        let perm = [2, 0, 3, 1];
        let permuted: Vec<Frame> = perm.iter().map(|&i| frames[i].clone()).collect();
        let pv = m.encode_video(&permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in pv.frame(k).iter().zip(v.frame(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_latent_decodes_in_range() {
        let m = small();
        let z = LatentVideo {
            latents: vec![0.0; 16 * 16 * 4],
            frame_count: 1,
            latent_size: (16, 16),
            source_resolution: (128, 128),
        };
        let f = &m.decode(&z).unwrap()[0];
        assert_eq!(f.shape(), (128, 128));
        assert!(f.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = LatentVideo {
            source_resolution: (64, 64),
            ..z
        };
        assert!(m.decode(&bad).is_err());
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let mut m = small();
        let before = nn::snapshot(m.varmap()).unwrap();
        let cfg = VaeTrainConfig {
            epochs: 0,
            ..VaeTrainConfig::default()
        };
        let r = train_vae(&[disc(16, 16, 4.0)], &mut m, &cfg).unwrap();
        assert!(r.epoch_losses.is_empty());
        assert_eq!(before, nn::snapshot(m.varmap()).unwrap());
    }

    #[test]
    fn training_is_reproducible_and_lowers_loss() {
        let frames: Vec<Frame> = (0..8).map(|i| disc(16, 16, 2.0 + i as f32 * 0.7)).collect();
        let cfg = VaeTrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 3e-3,
            seed: 9,
        };
        let mut a = small();
        let mut b = small();
        let ra = train_vae(&frames, &mut a, &cfg).unwrap();
        let rb = train_vae(&frames, &mut b, &cfg).unwrap();
        let (la, lb) = (ra.final_loss().unwrap(), rb.final_loss().unwrap());
        assert!(((la - lb) / la).abs() < 1e-3, "{la} vs {lb}");
        assert!(la < ra.epoch_losses[0], "{:?}", ra.epoch_losses);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.safetensors");
        let m = small();
        m.save(&path).unwrap();
        let l = VaeModel::load(&path).unwrap();
        let f = disc(16, 16, 5.0);
        assert_eq!(m.encode_frame(&f).unwrap(), l.encode_frame(&f).unwrap());
    }
}
