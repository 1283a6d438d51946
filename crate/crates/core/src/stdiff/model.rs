use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{composite_loss_weighted, denoised_estimate};
use super::unet::{Denoiser3D, DenoiserConfig};
use crate::align::AlignmentSpec;
use crate::audio_encoder::{encode_frames, AudioEmbedding, EncoderBackend};
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{self, DEVICE};
use crate::schedulers::{sample_loop, standard_normal_like, NoiseSchedule, SamplerKind};
use crate::vae::{tensor_to_frames, LatentVideo, VaeModel, LATENT_CHANNELS};

pub const CHECKPOINT_KIND: &str = "stdiff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Caps how strongly the temporal term amplifies noise-prediction error
    /// at low signal-to-noise timesteps: each clip's temporal term is scaled
    /// by `min(1, cap · ᾱ/(1 − ᾱ))`. `None` leaves it unweighted.
    pub temporal_snr_cap: Option<f64>,
    pub clip_frames: usize,
    /// Frame step between consecutive training clips.
    pub clip_stride: usize,
    pub batch_size: usize,
    pub scheduler_kind: SamplerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 100,
            lambda1: 1.0,
            lambda2: 0.1,
            temporal_snr_cap: Some(1.0),
            clip_frames: 3,
            clip_stride: 1,
            batch_size: 8,
            scheduler_kind: SamplerKind::Pndm,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0");
        }
        if self.temporal_snr_cap.is_some_and(|c| !(c > 0.0)) {
            return bad("temporal_snr_cap must be > 0");
        }
        if self.clip_frames == 0 || (self.lambda2 > 0.0 && self.clip_frames < 2) {
            return bad("clip_frames must be >= 2 when lambda2 > 0");
        }
        if self.batch_size == 0 || self.clip_stride == 0 {
            return bad("batch_size and clip_stride must be >= 1");
        }
        Ok(())
    }
}

/// One training unit: consecutive frame latents and the speech embedding of
/// the clip's centre frame context.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindow {
    /// `clip_frames × 4 × h × w`, frame-major, channels first.
    pub latents: Vec<f32>,
    pub conditioning: AudioEmbedding,
    pub start: usize,
    pub sample_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipSet {
    pub clips: Vec<ClipWindow>,
    pub clip_frames: usize,
    pub latent_size: (usize, usize),
}

impl ClipSet {
    pub fn new(clip_frames: usize, latent_size: (usize, usize)) -> Self {
        Self {
            clips: Vec::new(),
            clip_frames,
            latent_size,
        }
    }

    /// Adds every clip of one recording.
    pub fn add_video(
        &mut self,
        sample_id: &str,
        latents: &LatentVideo,
        frame_embeddings: &[AudioEmbedding],
        stride: usize,
    ) -> Result<()> {
        if latents.latent_size != self.latent_size {
            return Err(Error::shape(
                format!("{:?} latents", self.latent_size),
                format!("{:?}", latents.latent_size),
            ));
        }
        if frame_embeddings.len() != latents.frame_count {
            return Err(Error::shape(
                format!("{} frame embeddings", latents.frame_count),
                frame_embeddings.len(),
            ));
        }
        let f = self.clip_frames;
        if latents.frame_count < f || stride == 0 {
            return Ok(());
        }
        let chw = latents.to_tensor()?.flatten_all()?.to_vec1::<f32>()?;
        let per = latents.frame_len();
        for start in (0..=latents.frame_count - f).step_by(stride) {
            self.clips.push(ClipWindow {
                latents: chw[start * per..(start + f) * per].to_vec(),
                conditioning: frame_embeddings[start + f / 2].clone(),
                start,
                sample_id: sample_id.to_string(),
            });
        }
        Ok(())
    }

    /// `(B, F, 4, h, w)` latents and `(B, rows, cols)` conditioning.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let (h, w) = self.latent_size;
        let mut data = Vec::with_capacity(indices.len() * self.clip_frames * LATENT_CHANNELS * h * w);
        for &i in indices {
            data.extend_from_slice(&self.clips[i].latents);
        }
        let x = Tensor::from_vec(
            data,
            (indices.len(), self.clip_frames, LATENT_CHANNELS, h, w),
            &DEVICE,
        )?;
        let conds: Vec<&AudioEmbedding> = indices.iter().map(|&i| &self.clips[i].conditioning).collect();
        Ok((x, AudioEmbedding::stack(&conds)?))
    }

    /// Population standard deviation over all latent values.
    pub fn latent_std(&self) -> f64 {
        let n: usize = self.clips.iter().map(|c| c.latents.len()).sum();
        if n == 0 {
            return 1.0;
        }
        let mean = self.clips.iter().flat_map(|c| &c.latents).map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = self
            .clips
            .iter()
            .flat_map(|c| &c.latents)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        var.sqrt()
    }
}

/// Denoiser plus the latent scaling fitted to its training data.
pub struct StDiffModel {
    config: DenoiserConfig,
    varmap: VarMap,
    denoiser: Denoiser3D,
    /// Multiplier taking VAE latents to roughly unit variance.
    pub latent_scale: f64,
    /// Latent `(h, w)` the model was trained at.
    pub latent_size: (usize, usize),
    trained_steps: usize,
}

impl StDiffModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: DenoiserConfig, dtype: DType) -> Result<Self> {
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, dtype, &DEVICE);
        let denoiser = Denoiser3D::new(config.clone(), vb)?;
        nn::seeded_init(&varmap, config.seed)?;
        Ok(Self {
            config,
            varmap,
            denoiser,
            latent_scale: 1.0,
            latent_size: (0, 0),
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn denoiser(&self) -> &Denoiser3D {
        &self.denoiser
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
    }

    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut meta = CheckpointMeta::new(CHECKPOINT_KIND, &self.config)?
            .with_extra("latent_scale", self.latent_scale)
            .with_extra("trained_steps", self.trained_steps)
            .with_extra("latent_h", self.latent_size.0)
            .with_extra("latent_w", self.latent_size.1);
        for (k, v) in extra {
            meta = meta.with_extra(k, v);
        }
        checkpoint::save(path, &meta, &[("denoiser", &self.varmap)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut m = Self::new(ck.meta.config()?)?;
        ck.restore("denoiser", &m.varmap)?;
        m.latent_scale = ck.meta.extra_parsed("latent_scale")?;
        m.trained_steps = ck.meta.extra_parsed("trained_steps")?;
        m.latent_size = (ck.meta.extra_parsed("latent_h")?, ck.meta.extra_parsed("latent_w")?);
        Ok(m)
    }
}

/// One optimizer update on a batch of clips; returns the loss value.
///
/// `x0` holds scaled clip latents `(B, F, 4, h, w)` and `audio` the matching
/// conditioning `(B, rows, cols)`. Timesteps and noise are drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut StDiffModel,
    opt: &mut AdamW,
    x0: &Tensor,
    audio: &Tensor,
    sched: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let b = x0.dim(0)?;
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.train_steps())).collect();
    let eps = standard_normal_like(x0, rng)?;
    let abar: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect();
    let col = |f: fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = abar.iter().map(|&a| f(a)).collect();
        Ok(Tensor::from_vec(v, (b, 1, 1, 1, 1), &DEVICE)?.to_dtype(x0.dtype())?)
    };
    let z_t = (x0.broadcast_mul(&col(f64::sqrt)?)? + eps.broadcast_mul(&col(|a| (1.0 - a).sqrt())?)?)?;
    let pred = model.denoiser.forward(&z_t, &ts, audio)?;
    let denoised = denoised_estimate(&z_t, &pred, &abar)?;
    let weights: Option<Vec<f64>> = config
        .temporal_snr_cap
        .map(|cap| abar.iter().map(|&a| (cap * a / (1.0 - a)).min(1.0)).collect());
    let loss = composite_loss_weighted(
        &pred,
        &eps,
        &denoised,
        x0,
        config.lambda1,
        config.lambda2,
        weights.as_deref(),
    )?;
    let value = nn::backward_step(opt, &loss, model.trained_steps, "stdiff")?;
    model.trained_steps += 1;
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub latent_scale: f64,
}

/// Trains the denoiser on precomputed clips. The latent scale is fitted on the
/// first call and kept afterwards.
pub fn train_stdiff(
    clips: &ClipSet,
    model: &mut StDiffModel,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if clips.clips.is_empty() {
        return Err(Error::Dataset("no training clips".into()));
    }
    if clips.clip_frames != model.config.clip_frames {
        return Err(Error::Config(format!(
            "clips have {} frames, model expects {}",
            clips.clip_frames, model.config.clip_frames
        )));
    }
    if model.trained_steps == 0 {
        let std = clips.latent_std();
        model.latent_scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        model.latent_size = clips.latent_size;
    } else if model.latent_size != clips.latent_size {
        return Err(Error::shape(
            format!("{:?} latents", model.latent_size),
            format!("{:?}", clips.latent_size),
        ));
    }
    let dtype = model.varmap.all_vars().first().map(|v| v.dtype()).unwrap_or(DType::F32);
    let mut opt = nn::adam(&model.varmap, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..clips.clips.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(config.epochs),
        steps: 0,
        latent_scale: model.latent_scale,
    };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, audio) = clips.batch(batch)?;
            let x = (x.to_dtype(dtype)? * model.latent_scale)?;
            let audio = audio.to_dtype(dtype)?;
            total += train_step(model, &mut opt, &x, &audio, sched, config, &mut rng)? * batch.len() as f64;
            report.steps += 1;
        }
        report.epoch_losses.push(total / clips.clips.len() as f64);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Clips sampled together in one batch.
    pub batch_size: usize,
    pub allow_untrained: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Pndm,
            seed: 0,
            batch_size: 32,
            allow_untrained: false,
        }
    }
}

/// Clip start frames covering `frame_count` frames with stride 1.
pub fn clip_starts(frame_count: usize, clip_frames: usize) -> Vec<usize> {
    if frame_count <= clip_frames {
        vec![0]
    } else {
        (0..=frame_count - clip_frames).collect()
    }
}

/// Which frame of which clip supplies each output frame: interior clips give
/// their centre frame, the first and last clip also give their outer frames.
pub fn stitch_plan(frame_count: usize, clip_frames: usize) -> Vec<(usize, usize)> {
    let starts = clip_starts(frame_count, clip_frames);
    let c = clip_frames / 2;
    (0..frame_count)
        .map(|i| {
            if i <= c {
                (0, i)
            } else if i + clip_frames - c > frame_count {
                let k = starts.len() - 1;
                (k, i - starts[k])
            } else {
                (i - c, c)
            }
        })
        .collect()
}

/// Generates a video for `waveform`, one frame per whole frame window.
pub fn synthesize(
    waveform: &[f32],
    model: &StDiffModel,
    vae: &VaeModel,
    backend: &dyn EncoderBackend,
    sched: &NoiseSchedule,
    spec: &AlignmentSpec,
    config: &SynthesisConfig,
) -> Result<Vec<Frame>> {
    if model.trained_steps == 0 && !config.allow_untrained {
        return Err(Error::Untrained("stdiff denoiser has no training steps".into()));
    }
    let frame_count = spec.frames_for_samples(waveform.len());
    if frame_count == 0 {
        return Err(Error::InvalidInput(format!(
            "audio of {} samples is shorter than one frame window ({} samples)",
            waveform.len(),
            spec.samples_per_frame()
        )));
    }
    let cf = model.config.clip_frames;
    let (h, w) = model.latent_size;
    model.config.check_spatial(h, w)?;
    let starts = clip_starts(frame_count, cf);
    let embeddings = encode_frames(waveform, frame_count.max(cf), spec, backend, None)?;
    let dtype = model.varmap.all_vars().first().map(|v| v.dtype()).unwrap_or(DType::F32);

    let mut clip_latents: Vec<Tensor> = Vec::with_capacity(starts.len());
    for (chunk_idx, chunk) in starts.chunks(config.batch_size.max(1)).enumerate() {
        let first = chunk_idx * config.batch_size.max(1);
        let mut noise = Vec::with_capacity(chunk.len());
        for k in 0..chunk.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((first + k) as u64);
            let like = Tensor::zeros((1, cf, LATENT_CHANNELS, h, w), dtype, &DEVICE)?;
            noise.push(standard_normal_like(&like, &mut rng)?);
        }
        let x_t = Tensor::cat(&noise, 0)?;
        let conds: Vec<&AudioEmbedding> = chunk.iter().map(|&s| &embeddings[s + cf / 2]).collect();
        let audio = AudioEmbedding::stack(&conds)?.to_dtype(dtype)?;
        let mut step_rng = ChaCha8Rng::seed_from_u64(config.seed);
        step_rng.set_stream(u64::MAX - chunk_idx as u64);
        let b = chunk.len();
        let z0 = sample_loop(config.sampler, x_t, sched, &mut step_rng, |x, t| {
            model.denoiser.forward(x, &vec![t; b], &audio)
        })?;
        clip_latents.push((z0 / model.latent_scale)?.to_dtype(DType::F32)?);
    }
    let z = Tensor::cat(&clip_latents, 0)?;
    let decoded = vae.decode_tensor(&z.reshape((starts.len() * cf, LATENT_CHANNELS, h, w))?)?;
    let frames = tensor_to_frames(&decoded)?;
    Ok(stitch_plan(frame_count, cf)
        .into_iter()
        .map(|(clip, j)| frames[clip * cf + j].clone())
        .collect())
}
