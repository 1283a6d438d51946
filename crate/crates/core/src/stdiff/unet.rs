//! Factorized spatio-temporal U-Net over latent clips.
//!
//! Each level applies a spatial residual block (timestep-conditioned), a
//! temporal convolution across the frames of a clip and cross-attention from
//! latent positions to the rows of the speech embedding.

use candle_core::{Module, Tensor};
use candle_nn::{Conv1d, Conv1dConfig, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, timestep_embedding};
use crate::vae::LATENT_CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Frames per clip.
    pub clip_frames: usize,
    /// Width per resolution level; the spatial size halves between levels.
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub heads: usize,
    pub groups: usize,
    /// Speech embedding geometry.
    pub audio_rows: usize,
    pub audio_cols: usize,
    /// Input channels; the latent width for the clip model.
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            clip_frames: 3,
            channels: vec![64, 128],
            time_dim: 128,
            heads: 4,
            groups: 8,
            audio_rows: 12,
            audio_cols: 32,
            in_channels: LATENT_CHANNELS,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("denoiser: {m}")));
        if self.clip_frames == 0 || self.channels.is_empty() || self.in_channels == 0 {
            return bad("clip_frames, channels and in_channels must be non-empty".into());
        }
        if self.time_dim == 0 || self.audio_rows == 0 || self.audio_cols == 0 {
            return bad("time_dim and audio shape must be positive".into());
        }
        for &c in &self.channels {
            if c == 0 || self.heads == 0 || c % self.heads != 0 {
                return bad(format!("channel width {c} must be a positive multiple of heads ({})", self.heads));
            }
        }
        Ok(())
    }

    /// Spatial sizes must halve cleanly between levels.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.channels.len() - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::InvalidInput(format!(
                "latent size {h}x{w} must be divisible by {f} for {} levels",
                self.channels.len()
            )));
        }
        Ok(())
    }
}

fn groups_for(ch: usize, max_groups: usize) -> usize {
    (1..=max_groups.max(1).min(ch)).rev().find(|g| ch.is_multiple_of(*g)).unwrap_or(1)
}

fn group_norm(ch: usize, max_groups: usize, vb: VarBuilder) -> candle_core::Result<GroupNorm> {
    candle_nn::group_norm(groups_for(ch, max_groups), ch, 1e-5, vb)
}

fn conv3(i: usize, o: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(i, o, 3, cfg, vb)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(i: usize, o: usize, emb_dim: usize, groups: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: group_norm(i, groups, vb.pp("norm1"))?,
            conv1: conv3(i, o, 1, vb.pp("conv1"))?,
            emb: candle_nn::linear(emb_dim, o, vb.pp("emb"))?,
            norm2: group_norm(o, groups, vb.pp("norm2"))?,
            conv2: conv3(o, o, 1, vb.pp("conv2_zero_init"))?,
            skip: if i == o {
                None
            } else {
                Some(candle_nn::conv2d(i, o, 1, Default::default(), vb.pp("skip"))?)
            },
        })
    }

    /// `x: (N, C, h, w)`, `emb: (N, E)`.
    fn forward(&self, x: &Tensor, emb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let e = self.emb.forward(&emb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

/// Residual 1-D convolutions along the frame axis at every spatial position.
struct TemporalBlock {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl TemporalBlock {
    fn new(ch: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let cfg = Conv1dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv1: candle_nn::conv1d(ch, ch, 3, cfg, vb.pp("conv1"))?,
            conv2: candle_nn::conv1d(ch, ch, 3, cfg, vb.pp("conv2_zero_init"))?,
        })
    }

    fn forward(&self, x: &Tensor, frames: usize) -> candle_core::Result<Tensor> {
        if frames < 2 {
            return Ok(x.clone());
        }
        let (n, c, h, w) = x.dims4()?;
        let b = n / frames;
        let seq = x
            .reshape((b, frames, c, h, w))?
            .permute((0, 3, 4, 2, 1))?
            .reshape((b * h * w, c, frames))?;
        let y = self.conv2.forward(&self.conv1.forward(&seq)?.silu()?)?;
        let y = y
            .reshape((b, h, w, c, frames))?
            .permute((0, 4, 3, 1, 2))?
            .reshape((n, c, h, w))?;
        x + y
    }
}

struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(ch: usize, ctx: usize, heads: usize, groups: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm: group_norm(ch, groups, vb.pp("norm"))?,
            q: candle_nn::linear_no_bias(ch, ch, vb.pp("q"))?,
            k: candle_nn::linear_no_bias(ctx, ch, vb.pp("k"))?,
            v: candle_nn::linear_no_bias(ctx, ch, vb.pp("v"))?,
            out: candle_nn::linear(ch, ch, vb.pp("out_zero_init"))?,
            heads,
        })
    }

    /// `x: (N, C, h, w)`, `ctx: (N, R, D)`.
    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((n, c, h * w))?.transpose(1, 2)?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(ctx)?;
        let v = self.v.forward(ctx)?;
        let a = self.out.forward(&attention(&q, &k, &v, self.heads)?)?;
        let a = a.transpose(1, 2)?.reshape((n, c, h, w))?;
        Ok((x + a)?)
    }
}

struct Level {
    res: ResBlock,
    temporal: TemporalBlock,
    attn: CrossAttention,
}

impl Level {
    fn new(i: usize, o: usize, c: &DenoiserConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            res: ResBlock::new(i, o, c.time_dim, c.groups, vb.pp("res"))?,
            temporal: TemporalBlock::new(o, vb.pp("temporal"))?,
            attn: CrossAttention::new(o, c.time_dim, c.heads, c.groups, vb.pp("attn"))?,
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, ctx: &Tensor, frames: usize) -> Result<Tensor> {
        let x = self.res.forward(x, emb)?;
        let x = self.temporal.forward(&x, frames)?;
        self.attn.forward(&x, ctx)
    }
}

pub struct Denoiser3D {
    config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    audio_pool: Linear,
    frame_pos: Tensor,
    row_pos: Tensor,
    ctx_proj: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid: Level,
    mid_res: ResBlock,
    up: Vec<Level>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser3D {
    pub fn new(config: DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let ch = &c.channels;
        let e = c.time_dim;
        let levels = ch.len();
        let mut down = Vec::with_capacity(levels);
        let mut downsample = Vec::new();
        let mut prev = ch[0];
        for (l, &cl) in ch.iter().enumerate() {
            down.push(Level::new(prev, cl, c, vb.pp(format!("down{l}")))?);
            if l + 1 < levels {
                downsample.push(conv3(cl, cl, 2, vb.pp(format!("downsample{l}")))?);
            }
            prev = cl;
        }
        let last = ch[levels - 1];
        let mut up = Vec::with_capacity(levels);
        let mut upsample = Vec::new();
        let mut cur = last;
        for l in (0..levels).rev() {
            up.push(Level::new(cur + ch[l], ch[l], c, vb.pp(format!("up{l}")))?);
            if l > 0 {
                upsample.push(conv3(ch[l], ch[l], 1, vb.pp(format!("upsample{l}")))?);
            }
            cur = ch[l];
        }
        Ok(Self {
            time1: candle_nn::linear(e, e, vb.pp("time1"))?,
            time2: candle_nn::linear(e, e, vb.pp("time2"))?,
            audio_pool: candle_nn::linear(c.audio_cols, e, vb.pp("audio_pool"))?,
            frame_pos: vb.get((c.clip_frames, e), "frame_pos")?,
            row_pos: vb.get((c.audio_rows, c.audio_cols), "row_pos")?,
            ctx_proj: candle_nn::linear(c.audio_cols, e, vb.pp("ctx_proj"))?,
            conv_in: conv3(c.in_channels, ch[0], 1, vb.pp("conv_in"))?,
            mid: Level::new(last, last, c, vb.pp("mid"))?,
            mid_res: ResBlock::new(last, last, e, c.groups, vb.pp("mid_res"))?,
            norm_out: group_norm(ch[0], c.groups, vb.pp("norm_out"))?,
            conv_out: conv3(ch[0], c.in_channels, 1, vb.pp("conv_out_zero_init"))?,
            down,
            downsample,
            up,
            upsample,
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Predicts the noise in `x: (B, F, C, h, w)` at per-clip timesteps `t`,
    /// conditioned on `audio: (B, rows, cols)`.
    pub fn forward(&self, x: &Tensor, t: &[usize], audio: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let (b, f, ch, h, w) = x.dims5()?;
        if f != c.clip_frames || ch != c.in_channels {
            return Err(Error::shape(
                format!("(B, {}, {}, h, w)", c.clip_frames, c.in_channels),
                format!("{:?}", x.dims()),
            ));
        }
        if t.len() != b {
            return Err(Error::shape(format!("{b} timesteps"), t.len()));
        }
        let (ab, ar, ac) = audio.dims3()?;
        if (ab, ar, ac) != (b, c.audio_rows, c.audio_cols) {
            return Err(Error::shape(
                format!("({b}, {}, {})", c.audio_rows, c.audio_cols),
                format!("{:?}", audio.dims()),
            ));
        }
        c.check_spatial(h, w)?;
        let dtype = x.dtype();
        let e = c.time_dim;

        let temb = timestep_embedding(t, e)?.to_dtype(dtype)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let temb = (temb + self.audio_pool.forward(&audio.mean(1)?)?)?;
        let emb = temb
            .unsqueeze(1)?
            .broadcast_add(&self.frame_pos.unsqueeze(0)?)?
            .reshape((b * f, e))?;
        let ctx = self
            .ctx_proj
            .forward(&audio.broadcast_add(&self.row_pos.unsqueeze(0)?)?)?;
        let ctx = ctx
            .unsqueeze(1)?
            .broadcast_as((b, f, c.audio_rows, e))?
            .contiguous()?
            .reshape((b * f, c.audio_rows, e))?;

        let mut x = self.conv_in.forward(&x.reshape((b * f, ch, h, w))?)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (l, level) in self.down.iter().enumerate() {
            x = level.forward(&x, &emb, &ctx, f)?;
            skips.push(x.clone());
            if let Some(d) = self.downsample.get(l) {
                x = d.forward(&x)?;
            }
        }
        x = self.mid.forward(&x, &emb, &ctx, f)?;
        x = self.mid_res.forward(&x, &emb)?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            x = level.forward(&Tensor::cat(&[&x, &skip], 1)?, &emb, &ctx, f)?;
            if let Some(u) = self.upsample.get(i) {
                let (_, _, hh, ww) = x.dims4()?;
                x = u.forward(&x.upsample_nearest2d(hh * 2, ww * 2)?)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        Ok(out.reshape((b, f, ch, h, w))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DEVICE;
    use candle_core::DType;
    use candle_nn::VarMap;

    fn build(config: DenoiserConfig) -> (VarMap, Denoiser3D) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &DEVICE);
        let m = Denoiser3D::new(config, vb).unwrap();
        crate::nn::seeded_init(&vm, 1).unwrap();
        (vm, m)
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            channels: vec![8, 16],
            time_dim: 16,
            heads: 2,
            audio_rows: 5,
            audio_cols: 6,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn output_matches_input_shape() {
        let (_vm, m) = build(small());
        let x = Tensor::randn(0f32, 1.0, (2, 3, 4, 4, 6), &DEVICE).unwrap();
        let a = Tensor::randn(0f32, 1.0, (2, 5, 6), &DEVICE).unwrap();
        let y = m.forward(&x, &[10, 500], &a).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(m.forward(&x, &[10], &a).is_err());
        let odd = Tensor::zeros((1, 3, 4, 3, 3), DType::F32, &DEVICE).unwrap();
        assert!(m.forward(&odd, &[1], &a.narrow(0, 0, 1).unwrap()).is_err());
    }

    #[test]
    fn conditioning_reaches_output() {
        let (vm, m) = build(small());
        // Zero-initialized output layers give a zero prediction; perturb them.
        {
            let data = vm.data().lock().unwrap();
            for (name, var) in data.iter() {
                if name.contains("zero_init") && var.rank() >= 2 {
                    var.set(&(var.ones_like().unwrap() * 0.05).unwrap()).unwrap();
                }
            }
        }
        let x = Tensor::randn(0f32, 1.0, (1, 3, 4, 4, 4), &DEVICE).unwrap();
        let a = Tensor::randn(0f32, 1.0, (1, 5, 6), &DEVICE).unwrap();
        let y1 = m.forward(&x, &[100], &a).unwrap();
        let y2 = m.forward(&x, &[100], &(a * 2.0).unwrap()).unwrap();
        let diff = (y1 - y2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 1e-4);
    }
}
