//! Self-supervised speech transformer (wav2vec 2.0 layout) loaded from a
//! snapshot directory holding a `config.json` and `model.safetensors` with the
//! usual parameter names. Only inference is supported; the embedding is the
//! last hidden state.

use std::path::Path;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Conv1d, Conv1dConfig, GroupNorm, LayerNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendKind, EncoderBackend};
use crate::error::{Error, Result};
use crate::nn::{attention, DEVICE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Wav2Vec2Config {
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub conv_dim: Vec<usize>,
    pub conv_kernel: Vec<usize>,
    pub conv_stride: Vec<usize>,
    pub conv_bias: bool,
    /// `"group"` (base models) or `"layer"` (large models).
    pub feat_extract_norm: String,
    pub do_stable_layer_norm: bool,
    pub num_conv_pos_embeddings: usize,
    pub num_conv_pos_embedding_groups: usize,
    pub layer_norm_eps: f64,
    /// Zero-mean / unit-variance normalization of the raw input.
    pub normalize_input: bool,
}

impl Default for Wav2Vec2Config {
    /// The large layout: 1024-wide hidden states, 20 ms frame hop.
    fn default() -> Self {
        Self {
            hidden_size: 1024,
            num_hidden_layers: 24,
            num_attention_heads: 16,
            intermediate_size: 4096,
            conv_dim: vec![512; 7],
            conv_kernel: vec![10, 3, 3, 3, 3, 2, 2],
            conv_stride: vec![5, 2, 2, 2, 2, 2, 2],
            conv_bias: true,
            feat_extract_norm: "layer".into(),
            do_stable_layer_norm: true,
            num_conv_pos_embeddings: 128,
            num_conv_pos_embedding_groups: 16,
            layer_norm_eps: 1e-5,
            normalize_input: true,
        }
    }
}

impl Wav2Vec2Config {
    /// Output frames for `samples` input samples.
    pub fn output_frames(&self, samples: usize) -> usize {
        let mut len = samples;
        for (&k, &s) in self.conv_kernel.iter().zip(&self.conv_stride) {
            if len < k {
                return 0;
            }
            len = (len - k) / s + 1;
        }
        len
    }
}

enum FeatNorm {
    None,
    Group(GroupNorm),
    Layer(LayerNorm),
}

struct FeatureConv {
    conv: Conv1d,
    norm: FeatNorm,
}

impl FeatureConv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.conv.forward(x)?;
        let x = match &self.norm {
            FeatNorm::None => x,
            FeatNorm::Group(n) => n.forward(&x)?,
            FeatNorm::Layer(n) => n.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?,
        };
        Ok(x.gelu_erf()?)
    }
}

struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    attn_norm: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    final_norm: LayerNorm,
}

impl EncoderLayer {
    fn load(vb: VarBuilder, c: &Wav2Vec2Config) -> Result<Self> {
        let h = c.hidden_size;
        let ln = |name: &str| candle_nn::layer_norm(h, c.layer_norm_eps, vb.pp(name));
        Ok(Self {
            q: candle_nn::linear(h, h, vb.pp("attention.q_proj"))?,
            k: candle_nn::linear(h, h, vb.pp("attention.k_proj"))?,
            v: candle_nn::linear(h, h, vb.pp("attention.v_proj"))?,
            out: candle_nn::linear(h, h, vb.pp("attention.out_proj"))?,
            attn_norm: ln("layer_norm")?,
            ff_in: candle_nn::linear(h, c.intermediate_size, vb.pp("feed_forward.intermediate_dense"))?,
            ff_out: candle_nn::linear(c.intermediate_size, h, vb.pp("feed_forward.output_dense"))?,
            final_norm: ln("final_layer_norm")?,
        })
    }

    fn attend(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        Ok(self.out.forward(&attention(&q, &k, &v, heads)?)?)
    }

    fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.ff_out.forward(&self.ff_in.forward(x)?.gelu_erf()?)?)
    }

    fn forward(&self, x: &Tensor, heads: usize, stable: bool) -> Result<Tensor> {
        if stable {
            let x = (x + self.attend(&self.attn_norm.forward(x)?, heads)?)?;
            Ok((&x + self.feed_forward(&self.final_norm.forward(&x)?)?)?)
        } else {
            let x = self.attn_norm.forward(&(x + self.attend(x, heads)?)?)?;
            Ok(self.final_norm.forward(&(&x + self.feed_forward(&x)?)?)?)
        }
    }
}

pub struct Wav2Vec2Model {
    config: Wav2Vec2Config,
    feature_convs: Vec<FeatureConv>,
    proj_norm: LayerNorm,
    projection: Linear,
    pos_conv: Conv1d,
    encoder_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

fn pos_conv_weight(vb: &VarBuilder, c: &Wav2Vec2Config) -> Result<Tensor> {
    let h = c.hidden_size;
    let k = c.num_conv_pos_embeddings;
    let per_group = h / c.num_conv_pos_embedding_groups;
    let shape = (h, per_group, k);
    // Weight norm over all dims but the last, stored as (g, v).
    let from_norm = |g: Tensor, v: Tensor| -> Result<Tensor> {
        let norm = v.sqr()?.sum_keepdim((0, 1))?.sqrt()?;
        Ok(v.broadcast_mul(&g)?.broadcast_div(&norm)?)
    };
    if vb.contains_tensor("weight_g") {
        return from_norm(vb.get((1, 1, k), "weight_g")?, vb.get(shape, "weight_v")?);
    }
    if vb.contains_tensor("parametrizations.weight.original0") {
        return from_norm(
            vb.get((1, 1, k), "parametrizations.weight.original0")?,
            vb.get(shape, "parametrizations.weight.original1")?,
        );
    }
    Ok(vb.get(shape, "weight")?)
}

impl Wav2Vec2Model {
    pub fn load(vb: VarBuilder, config: Wav2Vec2Config) -> Result<Self> {
        let c = &config;
        let n = c.conv_dim.len();
        if n == 0 || c.conv_kernel.len() != n || c.conv_stride.len() != n {
            return Err(Error::Config("conv_dim/conv_kernel/conv_stride lengths differ".into()));
        }
        if !c.hidden_size.is_multiple_of(c.num_attention_heads)
            || !c.hidden_size.is_multiple_of(c.num_conv_pos_embedding_groups)
        {
            return Err(Error::Config("hidden_size must divide into heads and groups".into()));
        }
        let vb = if vb.contains_tensor("wav2vec2.feature_projection.projection.weight") {
            vb.pp("wav2vec2")
        } else {
            vb
        };
        let fe = vb.pp("feature_extractor.conv_layers");
        let mut feature_convs = Vec::with_capacity(n);
        let mut in_ch = 1;
        for i in 0..n {
            let layer = fe.pp(i.to_string());
            let cfg = Conv1dConfig {
                stride: c.conv_stride[i],
                ..Default::default()
            };
            let weight = layer.get((c.conv_dim[i], in_ch, c.conv_kernel[i]), "conv.weight")?;
            let bias = if c.conv_bias {
                Some(layer.get(c.conv_dim[i], "conv.bias")?)
            } else {
                None
            };
            let norm = match c.feat_extract_norm.as_str() {
                "layer" => FeatNorm::Layer(candle_nn::layer_norm(
                    c.conv_dim[i],
                    c.layer_norm_eps,
                    layer.pp("layer_norm"),
                )?),
                "group" if i == 0 => FeatNorm::Group(candle_nn::group_norm(
                    c.conv_dim[0],
                    c.conv_dim[0],
                    1e-5,
                    layer.pp("layer_norm"),
                )?),
                "group" => FeatNorm::None,
                other => {
                    return Err(Error::Config(format!("unknown feat_extract_norm {other}")))
                }
            };
            feature_convs.push(FeatureConv {
                conv: Conv1d::new(weight, bias, cfg),
                norm,
            });
            in_ch = c.conv_dim[i];
        }
        let last = c.conv_dim[n - 1];
        let pos_vb = vb.pp("encoder.pos_conv_embed.conv");
        let pos_weight = pos_conv_weight(&pos_vb, c)?;
        let pos_bias = pos_vb.get(c.hidden_size, "bias")?;
        let pos_conv = Conv1d::new(
            pos_weight,
            Some(pos_bias),
            Conv1dConfig {
                padding: c.num_conv_pos_embeddings / 2,
                groups: c.num_conv_pos_embedding_groups,
                ..Default::default()
            },
        );
        let layers = (0..c.num_hidden_layers)
            .map(|i| EncoderLayer::load(vb.pp(format!("encoder.layers.{i}")), c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj_norm: candle_nn::layer_norm(last, c.layer_norm_eps, vb.pp("feature_projection.layer_norm"))?,
            projection: candle_nn::linear(last, c.hidden_size, vb.pp("feature_projection.projection"))?,
            encoder_norm: candle_nn::layer_norm(c.hidden_size, c.layer_norm_eps, vb.pp("encoder.layer_norm"))?,
            feature_convs,
            pos_conv,
            layers,
            config,
        })
    }

    pub fn config(&self) -> &Wav2Vec2Config {
        &self.config
    }

    /// `(B, samples)` → last hidden state `(B, frames, hidden)`.
    pub fn forward(&self, audio: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let mut x = audio.unsqueeze(1)?;
        for conv in &self.feature_convs {
            x = conv.forward(&x)?;
        }
        let x = x.transpose(1, 2)?;
        let x = self.projection.forward(&self.proj_norm.forward(&x)?)?;
        let frames = x.dim(1)?;
        let pos = self.pos_conv.forward(&x.transpose(1, 2)?.contiguous()?)?;
        let pos = pos.narrow(2, 0, frames)?.gelu_erf()?.transpose(1, 2)?;
        let mut x = (x + pos)?;
        if !c.do_stable_layer_norm {
            x = self.encoder_norm.forward(&x)?;
        }
        for layer in &self.layers {
            x = layer.forward(&x, c.num_attention_heads, c.do_stable_layer_norm)?;
        }
        if c.do_stable_layer_norm {
            x = self.encoder_norm.forward(&x)?;
        }
        Ok(x)
    }
}

/// Pretrained speech encoder backend.
pub struct PretrainedSsl {
    model: Wav2Vec2Model,
    expected_input_samples: usize,
    snapshot_id: String,
}

impl PretrainedSsl {
    /// Loads `config.json` and `model.safetensors` from `dir`.
    pub fn from_snapshot(dir: &Path, expected_input_samples: usize) -> Result<Self> {
        let config_path = dir.join("config.json");
        let weights = dir.join("model.safetensors");
        let config_text =
            std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let config: Wav2Vec2Config = serde_json::from_str(&config_text)?;
        let bytes = std::fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        let mut hasher = Sha256::new();
        hasher.update(config_text.as_bytes());
        hasher.update(&bytes);
        let snapshot_id = hex::encode(&hasher.finalize()[..8]);
        let vb = VarBuilder::from_buffered_safetensors(bytes, DType::F32, &DEVICE)?;
        let model = Wav2Vec2Model::load(vb, config)?;
        Self::new(model, expected_input_samples, snapshot_id)
    }

    pub fn new(model: Wav2Vec2Model, expected_input_samples: usize, snapshot_id: String) -> Result<Self> {
        if model.config().output_frames(expected_input_samples) == 0 {
            return Err(Error::Config(format!(
                "{expected_input_samples} samples is shorter than the encoder receptive field"
            )));
        }
        Ok(Self {
            model,
            expected_input_samples,
            snapshot_id,
        })
    }
}

impl EncoderBackend for PretrainedSsl {
    fn kind(&self) -> BackendKind {
        BackendKind::PretrainedSsl
    }

    fn id(&self) -> String {
        format!("pretrained-ssl:{}:n{}", self.snapshot_id, self.expected_input_samples)
    }

    fn expected_input_samples(&self) -> usize {
        self.expected_input_samples
    }

    fn output_shape(&self) -> (usize, usize) {
        let c = self.model.config();
        (c.output_frames(self.expected_input_samples), c.hidden_size)
    }

    fn forward(&self, waveform: &[f32]) -> Result<Vec<f32>> {
        let mut input = Tensor::from_slice(waveform, (1, waveform.len()), &DEVICE)?;
        if self.model.config().normalize_input {
            let mean = input.mean_keepdim(D::Minus1)?;
            let centered = input.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
            input = centered.broadcast_div(&(var + 1e-7)?.sqrt()?)?;
        }
        Ok(self.model.forward(&input)?.squeeze(0)?.flatten_all()?.to_vec1::<f32>()?)
    }
}
