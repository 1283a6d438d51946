//! Run configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::protocol::ProtocolConfig;
use super::toy::ToyWorldSpec;
use crate::align::AlignmentSpec;
use crate::audio_encoder::{BackendKind, EncoderConfig};
use crate::baselines::{BaselineTrainConfig, SdiffConfig, VqConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::schedulers::ScheduleConfig;
use crate::stdiff::{DenoiserConfig, SynthesisConfig, TrainConfig};
use crate::vae::{VaeConfig, VaeTrainConfig, DOWNSAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Spatio-temporal latent diffusion over frame clips.
    Stdiff,
    /// Frame-wise pixel diffusion baseline.
    Sdiff,
    /// Vector-quantized adversarial baseline.
    Vq,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stdiff => "stdiff",
            Self::Sdiff => "sdiff",
            Self::Vq => "vq",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stdiff" => Ok(Self::Stdiff),
            "sdiff" => Ok(Self::Sdiff),
            "vq" => Ok(Self::Vq),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub models: Vec<ModelKind>,
    pub split: ProtocolConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Stdiff, ModelKind::Sdiff, ModelKind::Vq],
            split: ProtocolConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    /// Parent directory for run directories.
    pub output_dir: PathBuf,
    pub toy: ToyWorldSpec,
    pub align: AlignmentSpec,
    pub encoder: EncoderConfig,
    pub schedule: ScheduleConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub sdiff: SdiffConfig,
    pub vq: VqConfig,
    pub baseline_train: BaselineTrainConfig,
    pub eval: EvalConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Stdiff,
            output_dir: PathBuf::from("runs"),
            toy: ToyWorldSpec::default(),
            align: AlignmentSpec::default(),
            encoder: EncoderConfig::default(),
            schedule: ScheduleConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            synthesis: SynthesisConfig::default(),
            sdiff: SdiffConfig::default(),
            vq: VqConfig::default(),
            baseline_train: BaselineTrainConfig::default(),
            eval: EvalConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets every component seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.toy.seed = seed;
        self.vae.seed = seed;
        self.vae_train.seed = seed;
        self.denoiser.seed = seed;
        self.train.seed = seed;
        self.synthesis.seed = seed;
        self.sdiff.seed = seed;
        self.vq.seed = seed;
        self.baseline_train.seed = seed;
        self.eval.extractor_seed = seed;
        self
    }

    /// Cross-section consistency checks. Runs before any work starts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.toy.validate()?;
        self.align.validate()?;
        self.schedule.build()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.baseline_train.validate()?;
        self.vq.validate()?;
        self.sdiff.contrastive.validate()?;
        let (h, w) = self.align.target_resolution;
        if h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return bad(format!("align.target_resolution {h}x{w} must be divisible by {DOWNSAMPLE}"));
        }
        self.denoiser.check_spatial(h / DOWNSAMPLE, w / DOWNSAMPLE)?;
        if self.denoiser.clip_frames != self.train.clip_frames {
            return bad(format!(
                "denoiser.clip_frames ({}) and train.clip_frames ({}) differ",
                self.denoiser.clip_frames, self.train.clip_frames
            ));
        }
        if self.train.scheduler_kind != self.synthesis.sampler {
            return bad("train.scheduler_kind and synthesis.sampler differ".into());
        }
        if self.encoder.kind == BackendKind::ToyMel {
            let shape = (self.encoder.rows, self.encoder.cols);
            for (name, rows, cols) in [
                ("denoiser", self.denoiser.audio_rows, self.denoiser.audio_cols),
                ("sdiff", self.sdiff.audio_rows, self.sdiff.audio_cols),
                ("vq", self.vq.audio_rows, self.vq.audio_cols),
            ] {
                if (rows, cols) != shape {
                    return bad(format!(
                        "{name} expects {rows}x{cols} speech embeddings but the encoder produces {}x{}",
                        shape.0, shape.1
                    ));
                }
            }
        }
        if self.vq.resolution != self.align.target_resolution {
            return bad(format!(
                "vq.resolution {:?} must equal align.target_resolution {:?}",
                self.vq.resolution, self.align.target_resolution
            ));
        }
        if self.experiment.models.is_empty() {
            return bad("experiment.models is empty".into());
        }
        Ok(())
    }

    /// 32×32 frames and learning rates high enough to overfit a few toy
    /// clips within minutes on one CPU core.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.align.target_resolution = (32, 32);
        c.vq.resolution = (32, 32);
        c.toy.resolution = (32, 32);
        c.vae_train.epochs = 20;
        c.vae_train.learning_rate = 2e-3;
        c.train.epochs = 300;
        c.train.learning_rate = 1e-3;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_toy_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::toy().with_seed(7);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml(
            "model = \"vq\"\n[train]\nlearning_rate = 1e-4\n[align]\ntarget_resolution = [128, 128]\n",
        )
        .unwrap();
        assert_eq!(c.model, ModelKind::Vq);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn schema_violations_are_rejected() {
        for text in [
            "modle = \"stdiff\"\n",
            "model = \"gan\"\n",
            "[train]\nlearning_rate = -1.0\n",
            "[train]\nlambda2 = 0.5\nclip_frames = 1\n[denoiser]\nclip_frames = 1\n",
            "[denoiser]\nclip_frames = 4\n",
            "[align]\ntarget_resolution = [100, 100]\n",
            "[denoiser]\naudio_cols = 40\n",
        ] {
            assert!(
                matches!(RunConfig::from_toml(text), Err(Error::Config(_))),
                "accepted {text:?}"
            );
        }
    }
}
