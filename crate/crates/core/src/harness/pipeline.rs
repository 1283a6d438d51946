//! Preprocess, train, synthesize and evaluate, shared by the CLI and the
//! experiment runner.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::{ModelKind, RunConfig};
use super::dataset::{load_sample, DatasetManifest};
use super::protocol::{audit_split, split, Split};
use crate::align::normalize_frames;
use crate::audio_encoder::{encode_frames, AudioEmbedding, EmbeddingCache, EncoderBackend};
use crate::baselines::{train_sdiff_baseline, train_vq_baseline, PairedFrames, SdiffModel, VqModel};
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::metrics::{evaluate_videos, MetricReport};
use crate::schedulers::NoiseSchedule;
use crate::stdiff::{synthesize, train_stdiff, ClipSet, StDiffModel};
use crate::vae::{reconstruction_mse, train_vae, VaeModel, DOWNSAMPLE};

/// One recording after normalization and speech encoding.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    /// Frames at the target resolution, rescaled into `[0, 1]`.
    pub frames: Vec<Frame>,
    pub waveform: Vec<f32>,
    /// Speech embedding of each frame's context window.
    pub embeddings: Vec<AudioEmbedding>,
}

/// Loads, normalizes and encodes the listed samples.
pub fn prepare_samples(
    root: &Path,
    manifest: &DatasetManifest,
    ids: &[String],
    config: &RunConfig,
    backend: &dyn EncoderBackend,
    cache: Option<&EmbeddingCache>,
) -> Result<Vec<PreparedSample>> {
    ids.iter()
        .map(|id| {
            let record = manifest
                .get(id)
                .ok_or_else(|| Error::Dataset(format!("sample {id} is not in the manifest")))?;
            let pair = normalize_frames(&load_sample(root, record)?, &config.align)?;
            let embeddings =
                encode_frames(&pair.waveform, pair.frames.len(), &config.align, backend, cache)?;
            Ok(PreparedSample {
                id: id.clone(),
                frames: pair.frames,
                waveform: pair.waveform,
                embeddings,
            })
        })
        .collect()
}

/// A trained system of any kind.
pub enum TrainedModel {
    Stdiff { vae: VaeModel, denoiser: StDiffModel },
    Sdiff(SdiffModel),
    Vq(VqModel),
}

pub const VAE_FILE: &str = "vae.safetensors";

/// Checkpoint file names written for `kind`.
pub fn checkpoint_files(kind: ModelKind) -> &'static [&'static str] {
    match kind {
        ModelKind::Stdiff => &[VAE_FILE, "stdiff.safetensors"],
        ModelKind::Sdiff => &["sdiff.safetensors"],
        ModelKind::Vq => &["vq.safetensors"],
    }
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Stdiff { .. } => ModelKind::Stdiff,
            Self::Sdiff(_) => ModelKind::Sdiff,
            Self::Vq(_) => ModelKind::Vq,
        }
    }

    /// Writes the checkpoints into `dir` and returns their file names.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        let files = checkpoint_files(self.kind());
        match self {
            Self::Stdiff { vae, denoiser } => {
                vae.save(&dir.join(files[0]))?;
                denoiser.save(&dir.join(files[1]), &[])?;
            }
            Self::Sdiff(m) => m.save(&dir.join(files[0]))?,
            Self::Vq(m) => m.save(&dir.join(files[0]))?,
        }
        Ok(files.iter().map(|f| f.to_string()).collect())
    }

    pub fn load(kind: ModelKind, dir: &Path) -> Result<Self> {
        let files = checkpoint_files(kind);
        Ok(match kind {
            ModelKind::Stdiff => Self::Stdiff {
                vae: VaeModel::load(&dir.join(files[0]))?,
                denoiser: StDiffModel::load(&dir.join(files[1]))?,
            },
            ModelKind::Sdiff => Self::Sdiff(SdiffModel::load(&dir.join(files[0]))?),
            ModelKind::Vq => Self::Vq(VqModel::load(&dir.join(files[0]))?),
        })
    }

    /// Generates one frame per whole frame window of `waveform`.
    pub fn synthesize(
        &self,
        waveform: &[f32],
        config: &RunConfig,
        backend: &dyn EncoderBackend,
        sched: &NoiseSchedule,
    ) -> Result<Vec<Frame>> {
        let frame_embeddings = || {
            let n = config.align.frames_for_samples(waveform.len());
            if n == 0 {
                return Err(Error::InvalidInput(format!(
                    "audio of {} samples is shorter than one frame window",
                    waveform.len()
                )));
            }
            encode_frames(waveform, n, &config.align, backend, None)
        };
        match self {
            Self::Stdiff { vae, denoiser } => synthesize(
                waveform,
                denoiser,
                vae,
                backend,
                sched,
                &config.align,
                &config.synthesis,
            ),
            Self::Sdiff(m) => {
                if m.trained_steps() == 0 && !config.synthesis.allow_untrained {
                    return Err(Error::Untrained("spatial diffusion baseline".into()));
                }
                let frames = m.generate(
                    &frame_embeddings()?,
                    config.align.target_resolution,
                    sched,
                    config.synthesis.seed,
                )?;
                Ok(frames.into_iter().map(clamp_unit).collect())
            }
            Self::Vq(m) => {
                if m.trained_steps() == 0 && !config.synthesis.allow_untrained {
                    return Err(Error::Untrained("vector-quantized baseline".into()));
                }
                m.generate(&frame_embeddings()?)
            }
        }
    }
}

fn clamp_unit(mut f: Frame) -> Frame {
    for v in &mut f.data {
        *v = v.clamp(0.0, 1.0);
    }
    f
}

/// A trained model with its loss curves, keyed by curve name.
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    /// Scalar diagnostics such as the autoencoder reconstruction error.
    pub diagnostics: BTreeMap<String, f64>,
}

/// Trains `kind` from scratch on `samples`.
pub fn train_model(
    kind: ModelKind,
    samples: &[PreparedSample],
    config: &RunConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let mut loss_curves = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    let model = match kind {
        ModelKind::Stdiff => {
            let frames: Vec<Frame> = samples.iter().flat_map(|s| s.frames.iter().cloned()).collect();
            let mut vae = VaeModel::new(config.vae.clone())?;
            let vae_report = train_vae(&frames, &mut vae, &config.vae_train)?;
            loss_curves.insert("vae".into(), vae_report.epoch_losses.clone());
            diagnostics.insert("vae_reconstruction_mse".into(), reconstruction_mse(&vae, &frames)?);

            let (h, w) = config.align.target_resolution;
            let mut clips = ClipSet::new(config.train.clip_frames, (h / DOWNSAMPLE, w / DOWNSAMPLE));
            for s in samples {
                let latents = vae.encode_video(&s.frames)?;
                clips.add_video(&s.id, &latents, &s.embeddings, config.train.clip_stride)?;
            }
            let mut denoiser = StDiffModel::new(config.denoiser.clone())?;
            let report = train_stdiff(&clips, &mut denoiser, sched, &config.train)?;
            loss_curves.insert("stdiff".into(), report.epoch_losses);
            TrainedModel::Stdiff { vae, denoiser }
        }
        ModelKind::Sdiff => {
            let data = paired(samples)?;
            let mut m = SdiffModel::new(config.sdiff.clone())?;
            let report = train_sdiff_baseline(&data, &mut m, sched, &config.baseline_train)?;
            loss_curves.insert("sdiff".into(), report.epoch_losses);
            TrainedModel::Sdiff(m)
        }
        ModelKind::Vq => {
            let data = paired(samples)?;
            let mut m = VqModel::new(config.vq.clone())?;
            let report = train_vq_baseline(&data, &mut m, &config.baseline_train)?;
            loss_curves.insert("vq_generator".into(), report.generator_losses);
            loss_curves.insert("vq_discriminator".into(), report.discriminator_losses);
            let used = report.usage.iter().filter(|&&c| c > 0).count();
            diagnostics.insert("vq_codes_used".into(), used as f64);
            TrainedModel::Vq(m)
        }
    };
    Ok(TrainOutcome {
        model,
        loss_curves,
        diagnostics,
    })
}

fn paired(samples: &[PreparedSample]) -> Result<PairedFrames> {
    let mut data = PairedFrames::default();
    for s in samples {
        data.push_video(&s.frames, &s.embeddings)?;
    }
    Ok(data)
}

/// Generated and reference videos trimmed to a common length.
pub fn synthesize_all(
    model: &TrainedModel,
    samples: &[PreparedSample],
    config: &RunConfig,
    backend: &dyn EncoderBackend,
    sched: &NoiseSchedule,
) -> Result<(Vec<Vec<Frame>>, Vec<Vec<Frame>>)> {
    let mut generated = Vec::with_capacity(samples.len());
    let mut reference = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = model.synthesize(&s.waveform, config, backend, sched)?;
        let n = g.len().min(s.frames.len());
        g.truncate(n);
        generated.push(g);
        reference.push(s.frames[..n].to_vec());
    }
    Ok((generated, reference))
}

/// Everything an experiment produced.
pub struct ExperimentOutcome {
    pub split: Split,
    pub report: MetricReport,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    pub diagnostics: BTreeMap<String, f64>,
    /// Trained models in the order of `experiment.models`.
    pub models: Vec<TrainedModel>,
}

/// Splits the dataset by the configured protocol, trains every configured
/// model on the training side and scores it on the held-out side.
pub fn run_experiment(
    root: &Path,
    manifest: &DatasetManifest,
    config: &RunConfig,
    cache: Option<&EmbeddingCache>,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let split = split(manifest, &config.experiment.split)?;
    audit_split(manifest, &split)?;
    let backend = config.encoder.build()?;
    let sched = config.schedule.build()?;
    let train = prepare_samples(root, manifest, &split.train, config, backend.as_ref(), cache)?;
    let test = prepare_samples(root, manifest, &split.test, config, backend.as_ref(), cache)?;
    let extractor = config.eval.extractor()?;
    let mut report = MetricReport::default();
    let mut loss_curves = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();
    let mut models = Vec::new();
    for &kind in &config.experiment.models {
        log::info!("training {kind} on {} samples", train.len());
        let outcome = train_model(kind, &train, config, &sched)?;
        let (generated, reference) = synthesize_all(&outcome.model, &test, config, backend.as_ref(), &sched)?;
        report
            .rows
            .push(evaluate_videos(kind.name(), &generated, &reference, &extractor, &config.eval)?);
        loss_curves.extend(outcome.loss_curves);
        diagnostics.extend(outcome.diagnostics);
        models.push(outcome.model);
    }
    Ok(ExperimentOutcome {
        split,
        report,
        loss_curves,
        diagnostics,
        models,
    })
}
