//! Vector-quantized speech-to-frame translator with a patch discriminator.

use std::path::Path;

use candle_core::{DType, Module, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::quantize::{quantize_tensor, Codebook, CODEBOOK_SIZE, CODE_DIM};
use super::{BaselineTrainConfig, PairedFrames};
use crate::audio_encoder::AudioEmbedding;
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::nn::{self, DEVICE};
use crate::vae::{frames_to_tensor, tensor_to_frames};

pub const CHECKPOINT_KIND: &str = "vq-baseline";

/// Side length of the feature map the decoder starts from.
const SEED_GRID: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Output `(height, width)`; both must be `4·2^k`.
    pub resolution: (usize, usize),
    pub audio_rows: usize,
    pub audio_cols: usize,
    pub decoder_channels: usize,
    pub disc_channels: usize,
    pub commitment: f64,
    pub ema_decay: f64,
    pub adversarial_weight: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codebook_size: CODEBOOK_SIZE,
            code_dim: CODE_DIM,
            resolution: (128, 128),
            audio_rows: 12,
            audio_cols: 32,
            decoder_channels: 64,
            disc_channels: 32,
            commitment: 0.25,
            ema_decay: 0.99,
            adversarial_weight: 0.1,
            seed: 0,
        }
    }
}

impl VqConfig {
    fn upsample_stages(&self) -> Result<usize> {
        let (h, w) = self.resolution;
        let ok = |s: usize| s >= SEED_GRID && s.is_multiple_of(SEED_GRID) && (s / SEED_GRID).is_power_of_two();
        if h != w || !ok(h) {
            return Err(Error::Config(format!(
                "vq resolution must be square and 4·2^k, got {h}x{w}"
            )));
        }
        Ok((h / SEED_GRID).trailing_zeros() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.upsample_stages()?;
        if self.codebook_size == 0 || self.code_dim == 0 || self.decoder_channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("vq sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.commitment < 0.0 || self.adversarial_weight < 0.0 {
            return Err(Error::Config("vq ema_decay must be in [0, 1), weights >= 0".into()));
        }
        Ok(())
    }
}

struct Generator {
    to_codes: Linear,
    to_grid: Linear,
    ups: Vec<Conv2d>,
    out: Conv2d,
    grid_channels: usize,
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: (k - 1) / 2,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(cin, cout, k, cfg, vb)
}

impl Generator {
    fn new(c: &VqConfig, vb: VarBuilder) -> Result<Self> {
        let stages = c.upsample_stages()?;
        let grid_channels = c.decoder_channels;
        let to_codes = candle_nn::linear(c.audio_cols, c.code_dim, vb.pp("encoder"))?;
        let to_grid = candle_nn::linear(
            c.audio_rows * c.code_dim,
            grid_channels * SEED_GRID * SEED_GRID,
            vb.pp("decoder.grid"),
        )?;
        let mut ups = Vec::with_capacity(stages);
        let mut ch = grid_channels;
        for i in 0..stages {
            let next = (ch / 2).max(16);
            ups.push(conv(ch, next, 3, 1, vb.pp(format!("decoder.up{i}")))?);
            ch = next;
        }
        let out = conv(ch, 1, 3, 1, vb.pp("decoder.out"))?;
        Ok(Self {
            to_codes,
            to_grid,
            ups,
            out,
            grid_channels,
        })
    }

    /// `(B, rows, cols)` → pre-quantization codes `(B·rows, code_dim)`.
    fn encode(&self, audio: &Tensor) -> Result<Tensor> {
        let (b, r, c) = audio.dims3()?;
        Ok(self.to_codes.forward(&audio.reshape((b * r, c))?)?)
    }

    /// Quantized codes `(B·rows, code_dim)` → frames `(B, 1, H, W)`.
    fn decode(&self, codes: &Tensor, batch: usize) -> Result<Tensor> {
        let flat = codes.reshape((batch, ()))?;
        let mut x = self
            .to_grid
            .forward(&flat)?
            .reshape((batch, self.grid_channels, SEED_GRID, SEED_GRID))?
            .silu()?;
        for up in &self.ups {
            let (_, _, h, w) = x.dims4()?;
            x = up.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?.silu()?;
        }
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&x)?)?)
    }
}

/// Convolutional critic scoring overlapping patches.
struct PatchDiscriminator {
    convs: Vec<Conv2d>,
}

impl PatchDiscriminator {
    fn new(c: &VqConfig, vb: VarBuilder) -> Result<Self> {
        let d = c.disc_channels;
        Ok(Self {
            convs: vec![
                conv(1, d, 4, 2, vb.pp("c0"))?,
                conv(d, 2 * d, 4, 2, vb.pp("c1"))?,
                conv(2 * d, 1, 3, 1, vb.pp("out"))?,
            ],
        })
    }

    /// `(B, 1, H, W)` → patch logits `(B, 1, H/4, W/4)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(&x)?;
            if i < last {
                x = (x.relu()? - (x.neg()?.relu()? * 0.2)?)?;
            }
        }
        Ok(x)
    }
}

/// Hinge critic loss `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn hinge_discriminator_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = real_logits.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_logits.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// Generator side of the hinge objective, `−mean(D(fake))`.
pub fn hinge_generator_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

pub struct VqModel {
    config: VqConfig,
    gen_vars: VarMap,
    disc_vars: VarMap,
    generator: Generator,
    discriminator: PatchDiscriminator,
    pub codebook: Codebook,
    trained_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqTrainReport {
    pub generator_losses: Vec<f64>,
    pub discriminator_losses: Vec<f64>,
    /// Codebook usage during the last epoch.
    pub usage: Vec<u64>,
    /// Vectors quantized during the last epoch.
    pub quantized: u64,
    pub steps: usize,
}

impl VqModel {
    pub fn new(config: VqConfig) -> Result<Self> {
        config.validate()?;
        let gen_vars = VarMap::new();
        let disc_vars = VarMap::new();
        let generator = Generator::new(&config, VarBuilder::from_varmap(&gen_vars, DType::F32, &DEVICE))?;
        let discriminator =
            PatchDiscriminator::new(&config, VarBuilder::from_varmap(&disc_vars, DType::F32, &DEVICE))?;
        nn::seeded_init(&gen_vars, config.seed)?;
        nn::seeded_init(&disc_vars, config.seed.wrapping_add(1))?;
        let codebook = Codebook::new(config.codebook_size, config.code_dim, config.seed.wrapping_add(2))?;
        Ok(Self {
            config,
            gen_vars,
            disc_vars,
            generator,
            discriminator,
            codebook,
            trained_steps: 0,
        })
    }

    pub fn config(&self) -> &VqConfig {
        &self.config
    }

    pub fn trained_steps(&self) -> usize {
        self.trained_steps
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

    /// Patch critic logits for `(B, 1, H, W)` frames.
    pub fn discriminate(&self, frames: &Tensor) -> Result<Tensor> {
        self.discriminator.forward(frames)
    }

    /// One frame per embedding.
    pub fn generate(&self, embeddings: &[AudioEmbedding]) -> Result<Vec<Frame>> {
        if embeddings.is_empty() {
            return Ok(Vec::new());
        }
        let mut out = Vec::with_capacity(embeddings.len());
        for chunk in embeddings.chunks(64) {
            let refs: Vec<&AudioEmbedding> = chunk.iter().collect();
            let audio = AudioEmbedding::stack(&refs)?;
            self.check_audio(&audio)?;
            let z = self.generator.encode(&audio)?;
            let (q, _, _) = quantize_tensor(&z, &self.codebook)?;
            out.extend(tensor_to_frames(&self.generator.decode(&q, chunk.len())?)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let book = VarMap::new();
        book.data().lock().expect("varmap lock poisoned").insert(
            "entries".into(),
            Var::from_tensor(&self.codebook.to_tensor()?)?,
        );
        let meta = CheckpointMeta::new(CHECKPOINT_KIND, &self.config)?
            .with_extra("trained_steps", self.trained_steps)
            .with_extra("codebook_size", self.codebook.size())
            .with_extra("code_dim", self.codebook.dim());
        checkpoint::save(
            path,
            &meta,
            &[("generator", &self.gen_vars), ("discriminator", &self.disc_vars), ("codebook", &book)],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.meta.config()?)?;
        ck.restore("generator", &model.gen_vars)?;
        ck.restore("discriminator", &model.disc_vars)?;
        let book = VarMap::new();
        book.data().lock().expect("varmap lock poisoned").insert(
            "entries".into(),
            Var::from_tensor(&model.codebook.to_tensor()?)?,
        );
        ck.restore("codebook", &book)?;
        let entries = book.data().lock().expect("varmap lock poisoned")["entries"]
            .flatten_all()?
            .to_vec1::<f32>()?;
        model.codebook.set_entries(entries)?;
        model.trained_steps = ck.meta.extra_parsed("trained_steps")?;
        Ok(model)
    }
}

/// Alternating generator / critic updates.
///
/// The generator minimizes frame MSE, the commitment term and the hinge
/// adversarial term; code vectors follow their assignments by moving average.
pub fn train_vq_baseline(
    data: &PairedFrames,
    model: &mut VqModel,
    config: &BaselineTrainConfig,
) -> Result<VqTrainReport> {
    config.validate()?;
    let (h, w) = data.validate()?;
    if (h, w) != model.config.resolution {
        return Err(Error::shape(format!("{:?} frames", model.config.resolution), format!("{h}x{w}")));
    }
    let mut g_opt = nn::adam(&model.gen_vars, config.learning_rate)?;
    let mut d_opt = nn::adam(&model.disc_vars, config.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = VqTrainReport {
        generator_losses: Vec::new(),
        discriminator_losses: Vec::new(),
        usage: vec![0; model.codebook.size()],
        quantized: 0,
        steps: 0,
    };
    let c = model.config.clone();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        model.codebook.reset_usage();
        report.quantized = 0;
        let (mut g_total, mut d_total) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let frames: Vec<Frame> = batch.iter().map(|&i| data.frames[i].clone()).collect();
            let embs: Vec<&AudioEmbedding> = batch.iter().map(|&i| &data.embeddings[i]).collect();
            let real = frames_to_tensor(&frames)?;
            let audio = AudioEmbedding::stack(&embs)?;
            model.check_audio(&audio)?;

            let z = model.generator.encode(&audio)?;
            let (q, indices, commit) = quantize_tensor(&z, &model.codebook)?;
            let fake = model.generator.decode(&q, batch.len())?;
            let recon = nn::mse(&fake, &real)?;
            let adv = hinge_generator_loss(&model.discriminator.forward(&fake)?)?;
            let g_loss = ((recon + (commit * c.commitment)?)? + (adv * c.adversarial_weight)?)?;
            let g_value = nn::backward_step(&mut g_opt, &g_loss, model.trained_steps, "vq generator")?;

            let z_flat = z.detach().flatten_all()?.to_vec1::<f32>()?;
            model.codebook.ema_update(&z_flat, &indices, c.ema_decay)?;
            model.codebook.record_usage(&indices);
            report.quantized += indices.len() as u64;

            let d_loss = hinge_discriminator_loss(
                &model.discriminator.forward(&real)?,
                &model.discriminator.forward(&fake.detach())?,
            )?;
            let d_value = nn::backward_step(&mut d_opt, &d_loss, model.trained_steps, "vq discriminator")?;

            model.trained_steps += 1;
            report.steps += 1;
            g_total += g_value * batch.len() as f64;
            d_total += d_value * batch.len() as f64;
        }
        report.generator_losses.push(g_total / data.len() as f64);
        report.discriminator_losses.push(d_total / data.len() as f64);
        report.usage = model.codebook.usage().to_vec();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> VqConfig {
        VqConfig {
            codebook_size: 8,
            code_dim: 16,
            resolution: (16, 16),
            audio_rows: 3,
            audio_cols: 5,
            decoder_channels: 16,
            disc_channels: 4,
            ..VqConfig::default()
        }
    }

    fn data(n: usize) -> PairedFrames {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = PairedFrames::default();
        for _ in 0..n {
            let f = Frame::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let e = AudioEmbedding {
                rows: 3,
                cols: 5,
                data: (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
                source_backend: "test".into(),
            };
            d.push_video(&[f], &[e]).unwrap();
        }
        d
    }

    #[test]
    fn hinge_on_real_pairs_is_finite() {
        let m = VqModel::new(tiny()).unwrap();
        let d = data(2);
        let real = frames_to_tensor(&d.frames).unwrap();
        let logits = m.discriminate(&real).unwrap();
        assert_eq!(logits.dims(), &[2, 1, 4, 4]);
        let l = hinge_discriminator_loss(&logits, &logits).unwrap();
        assert!(nn::scalar_f64(&l).unwrap().is_finite());
        let known = Tensor::new(&[2.0f32, -0.5], &DEVICE).unwrap();
        // relu(1-2)=0, relu(1+0.5)=1.5 → 0.75; fake side relu(3)=3, relu(0.5)=0.5 → 1.75
        let v = nn::scalar_f64(&hinge_discriminator_loss(&known, &known).unwrap()).unwrap();
        assert!((v - 2.5).abs() < 1e-6);
    }

    #[test]
    fn usage_histogram_matches_quantize_calls() {
        let mut m = VqModel::new(tiny()).unwrap();
        let d = data(10);
        let cfg = BaselineTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..BaselineTrainConfig::default()
        };
        let r = train_vq_baseline(&d, &mut m, &cfg).unwrap();
        assert_eq!(r.usage.iter().sum::<u64>(), r.quantized);
        assert_eq!(r.quantized, 10 * 3);
        assert_eq!(r.generator_losses.len(), 2);
        assert!(r.discriminator_losses.iter().all(|v| v.is_finite()));
        assert_eq!(m.generate(&d.embeddings[..3]).unwrap().len(), 3);
    }

    #[test]
    fn checkpoint_round_trip_keeps_codebook() {
        let mut m = VqModel::new(tiny()).unwrap();
        let d = data(4);
        train_vq_baseline(&d, &mut m, &BaselineTrainConfig { epochs: 1, ..BaselineTrainConfig::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vq.safetensors");
        m.save(&p).unwrap();
        let ck = checkpoint::load(&p).unwrap();
        assert_eq!(ck.meta.extra_parsed::<usize>("codebook_size").unwrap(), 8);
        assert_eq!(ck.meta.extra_parsed::<usize>("code_dim").unwrap(), 16);
        let back = VqModel::load(&p).unwrap();
        assert_eq!(back.codebook.entries(), m.codebook.entries());
        assert_eq!(back.generate(&d.embeddings).unwrap(), m.generate(&d.embeddings).unwrap());
    }

    #[test]
    fn default_geometry_is_recorded() {
        let m = VqModel::new(VqConfig { resolution: (32, 32), ..VqConfig::default() }).unwrap();
        assert_eq!((m.codebook.size(), m.codebook.dim()), (32, 256));
        assert!(VqModel::new(VqConfig { resolution: (24, 24), ..VqConfig::default() }).is_err());
    }
}
