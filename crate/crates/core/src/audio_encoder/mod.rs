//! Speech conditioning embeddings.
//!
//! An [`EncoderBackend`] maps a fixed-length waveform segment to a
//! `rows × cols` matrix. Two backends are provided: a weight-free log-mel
//! filterbank ([`ToyMel`]) for hermetic runs, and a self-supervised speech
//! transformer loaded from a pinned snapshot ([`PretrainedSsl`]) whose last
//! hidden layer is the embedding.

mod cache;
mod mel;
mod wav2vec2;

pub use cache::EmbeddingCache;
pub use mel::{mel_to_hz, hz_to_mel, ToyMel, ToyMelConfig};
pub use wav2vec2::{PretrainedSsl, Wav2Vec2Config};

use std::path::PathBuf;

use candle_core::{DType, Module, Tensor};
use candle_nn::{Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::align::{align_waveform, AlignmentSpec};
use crate::error::{Error, Result};
use crate::nn::DEVICE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    PretrainedSsl,
    ToyMel,
}

/// A conditioning matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioEmbedding {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
    pub source_backend: String,
}

impl AudioEmbedding {
    pub fn zeros(rows: usize, cols: usize, source_backend: &str) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            source_backend: source_backend.to_string(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (self.rows, self.cols), &DEVICE)?)
    }

    /// Stacks embeddings of identical shape into `(B, rows, cols)`.
    pub fn stack(embeddings: &[&AudioEmbedding]) -> Result<Tensor> {
        let first = embeddings
            .first()
            .ok_or_else(|| Error::InvalidInput("no embeddings to stack".into()))?;
        let mut data = Vec::with_capacity(embeddings.len() * first.data.len());
        for e in embeddings {
            if (e.rows, e.cols) != (first.rows, first.cols) {
                return Err(Error::shape(
                    format!("{}x{}", first.rows, first.cols),
                    format!("{}x{}", e.rows, e.cols),
                ));
            }
            data.extend_from_slice(&e.data);
        }
        Ok(Tensor::from_vec(
            data,
            (embeddings.len(), first.rows, first.cols),
            &DEVICE,
        )?)
    }
}

/// A speech encoder with a fixed input length and output shape.
pub trait EncoderBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    /// Stable identifier including whatever pins the weights.
    fn id(&self) -> String;
    fn expected_input_samples(&self) -> usize;
    fn output_shape(&self) -> (usize, usize);
    /// Row-major `rows × cols` output for an already validated input.
    fn forward(&self, waveform: &[f32]) -> Result<Vec<f32>>;
}

/// Encodes one waveform segment.
pub fn encode(waveform: &[f32], backend: &dyn EncoderBackend) -> Result<AudioEmbedding> {
    if waveform.len() != backend.expected_input_samples() {
        return Err(Error::shape(
            format!("{} samples", backend.expected_input_samples()),
            format!("{} samples", waveform.len()),
        ));
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder input waveform".into()));
    }
    let (rows, cols) = backend.output_shape();
    let data = backend.forward(waveform)?;
    if data.len() != rows * cols {
        return Err(Error::shape(
            format!("{rows}x{cols}"),
            format!("{} values", data.len()),
        ));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} embedding", backend.id())));
    }
    Ok(AudioEmbedding {
        rows,
        cols,
        data,
        source_backend: backend.id(),
    })
}

/// Centre-crops or symmetrically zero-pads `samples` to exactly `len`.
pub fn fit_to_length(samples: &[f32], len: usize) -> Vec<f32> {
    let n = samples.len();
    if n >= len {
        let start = (n - len) / 2;
        return samples[start..start + len].to_vec();
    }
    let mut out = vec![0.0; len];
    let start = (len - n) / 2;
    out[start..start + n].copy_from_slice(samples);
    out
}

/// Embeds the bidirectional context of each of `frame_count` frames.
///
/// Context buffers are fitted to the backend's input length first, so any
/// backend can be paired with any alignment geometry.
pub fn encode_frames(
    waveform: &[f32],
    frame_count: usize,
    spec: &AlignmentSpec,
    backend: &dyn EncoderBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<AudioEmbedding>> {
    let windows = align_waveform(waveform, frame_count, spec)?;
    windows
        .par_iter()
        .map(|w| {
            let input = fit_to_length(&w.context_samples, backend.expected_input_samples());
            match cache {
                Some(c) => c.get_or_encode(&input, backend),
                None => encode(&input, backend),
            }
        })
        .collect()
}

/// Backend selection as it appears in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: BackendKind,
    /// Directory holding `config.json` and `model.safetensors` for the
    /// pretrained backend.
    pub snapshot: Option<PathBuf>,
    pub expected_input_samples: usize,
    pub rows: usize,
    pub cols: usize,
    pub n_mels: usize,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub sample_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let mel = ToyMelConfig::default();
        Self {
            kind: BackendKind::ToyMel,
            snapshot: None,
            expected_input_samples: mel.expected_input_samples,
            rows: mel.rows,
            cols: mel.cols,
            n_mels: mel.n_mels,
            n_fft: mel.n_fft,
            f_min: mel.f_min,
            f_max: mel.f_max,
            sample_rate: mel.sample_rate,
        }
    }
}

impl EncoderConfig {
    pub fn build(&self) -> Result<Box<dyn EncoderBackend>> {
        match self.kind {
            BackendKind::ToyMel => Ok(Box::new(ToyMel::new(ToyMelConfig {
                sample_rate: self.sample_rate,
                expected_input_samples: self.expected_input_samples,
                rows: self.rows,
                cols: self.cols,
                n_mels: self.n_mels,
                n_fft: self.n_fft,
                f_min: self.f_min,
                f_max: self.f_max,
            })?)),
            BackendKind::PretrainedSsl => {
                let dir = self.snapshot.as_ref().ok_or_else(|| {
                    Error::Config("pretrained-ssl backend needs encoder.snapshot".into())
                })?;
                Ok(Box::new(PretrainedSsl::from_snapshot(
                    dir,
                    self.expected_input_samples,
                )?))
            }
        }
    }
}

/// Learned linear map from a time-pooled embedding to a semantic vector.
pub struct SemanticProjection {
    linear: Linear,
    in_dim: usize,
    out_dim: usize,
}

impl SemanticProjection {
    pub fn new(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "projection dims must be positive, got {in_dim} -> {out_dim}"
            )));
        }
        Ok(Self {
            linear: candle_nn::linear(in_dim, out_dim, vb)?,
            in_dim,
            out_dim,
        })
    }

    /// Standalone projection with its own seeded parameters.
    pub fn seeded(in_dim: usize, out_dim: usize, seed: u64) -> Result<(Self, VarMap)> {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &DEVICE);
        let p = Self::new(in_dim, out_dim, vb)?;
        crate::nn::seeded_init(&vm, seed)?;
        Ok((p, vm))
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `(B, rows, cols)` → `(B, out_dim)`, mean over rows then linear.
    pub fn forward(&self, embeddings: &Tensor) -> Result<Tensor> {
        let pooled = embeddings.mean(1)?;
        Ok(self.linear.forward(&pooled)?)
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.linear.bias()
    }
}

/// Projects one embedding to a semantic vector.
pub fn project_to_semantic(
    embedding: &AudioEmbedding,
    projection: &SemanticProjection,
) -> Result<Vec<f32>> {
    if embedding.cols != projection.in_dim {
        return Err(Error::shape(
            format!("{} columns", projection.in_dim),
            format!("{} columns", embedding.cols),
        ));
    }
    if embedding.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let x = embedding.to_tensor()?.unsqueeze(0)?;
    Ok(projection.forward(&x)?.squeeze(0)?.to_vec1::<f32>()?)
}
