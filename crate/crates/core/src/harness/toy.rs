//! Synthetic paired speech/video generator.
//!
//! One scalar control trajectory drives both modalities. The video shows a
//! sagittal-style silhouette: a curved palate at the top and a tongue below it
//! whose gap (the aperture) follows the control. The audio is a tone whose
//! frequency and amplitude follow the same control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlFamily {
    /// Bounded random walk on knots, smoothly interpolated between them.
    RandomWalk { knots_per_second: f64, step: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyWorldSpec {
    /// `(height, width)` in pixels.
    pub resolution: (usize, usize),
    pub fps: f64,
    pub sample_rate: f64,
    pub clip_seconds: f64,
    pub control: ControlFamily,
    /// Aperture range as a fraction of the frame height.
    pub aperture_min: f64,
    pub aperture_max: f64,
    /// Palate edge height (fraction of frame height) at the frame sides.
    pub palate_base: f64,
    pub palate_arch: f64,
    /// Per-speaker shift of the palate edge.
    pub speaker_palate_shift: f64,
    pub tone_min_hz: f64,
    pub tone_max_hz: f64,
    /// Per-speaker pitch shift.
    pub speaker_pitch_shift_hz: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    pub speakers: Vec<String>,
    pub vocabulary: Vec<String>,
    pub words_per_sample: usize,
    pub cohorts: Vec<String>,
    pub seed: u64,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        Self {
            resolution: (32, 32),
            fps: 26.0,
            sample_rate: 16000.0,
            clip_seconds: 1.0,
            control: ControlFamily::RandomWalk {
                knots_per_second: 6.0,
                step: 0.45,
            },
            aperture_min: 0.05,
            aperture_max: 0.4,
            palate_base: 0.3,
            palate_arch: 0.12,
            speaker_palate_shift: 0.03,
            tone_min_hz: 250.0,
            tone_max_hz: 1500.0,
            speaker_pitch_shift_hz: 40.0,
            amp_min: 0.2,
            amp_max: 0.8,
            speakers: vec!["spk01".into(), "spk02".into(), "spk03".into()],
            vocabulary: ["sun", "light", "sunlight", "rain", "bow", "rainbow", "water", "tongue", "mama", "papa", "tea", "shoe"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            words_per_sample: 2,
            cohorts: vec!["toy".into()],
            seed: 0,
        }
    }
}

pub const PALATE_LEVEL: f32 = 0.85;
pub const TONGUE_LEVEL: f32 = 0.7;
pub const AIR_LEVEL: f32 = 0.05;
const SUPERSAMPLE: usize = 4;

/// One generated recording with its tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub speaker: String,
    pub words: Vec<String>,
    pub cohort: String,
    pub frames: Vec<Frame>,
    pub waveform: Vec<f32>,
    /// Control value at each frame's midpoint.
    pub frame_controls: Vec<f64>,
}

impl ToyWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("toy world: {m}")));
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return bad("resolution must be positive");
        }
        if !(self.fps > 0.0 && self.sample_rate > 0.0 && self.clip_seconds > 0.0) {
            return bad("fps, sample_rate and clip_seconds must be positive");
        }
        if !(0.0 <= self.aperture_min && self.aperture_min <= self.aperture_max) {
            return bad("need 0 <= aperture_min <= aperture_max");
        }
        let lowest = self.palate_base
            + self.palate_arch
            + self.speaker_palate_shift * self.speakers.len().saturating_sub(1) as f64
            + self.aperture_max;
        if lowest >= 1.0 {
            return bad("palate + aperture geometry leaves the frame");
        }
        if !(self.tone_min_hz > 0.0 && self.tone_min_hz <= self.tone_max_hz) {
            return bad("need 0 < tone_min_hz <= tone_max_hz");
        }
        let top = self.tone_max_hz
            + self.speaker_pitch_shift_hz * self.speakers.len().saturating_sub(1) as f64;
        if top >= self.sample_rate / 2.0 {
            return bad("tone exceeds nyquist");
        }
        if !(0.0 <= self.amp_min && self.amp_min <= self.amp_max && self.amp_max <= 1.0) {
            return bad("need 0 <= amp_min <= amp_max <= 1");
        }
        if self.speakers.is_empty() || self.cohorts.is_empty() {
            return bad("speakers and cohorts must be non-empty");
        }
        if self.words_per_sample > 0 && self.vocabulary.is_empty() {
            return bad("vocabulary is empty");
        }
        match self.control {
            ControlFamily::RandomWalk { knots_per_second, step } => {
                if !(knots_per_second > 0.0 && step >= 0.0) {
                    return bad("random walk needs knots_per_second > 0 and step >= 0");
                }
            }
            ControlFamily::Constant { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return bad("constant control must lie in [0, 1]");
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.clip_seconds * self.fps).round().max(1.0) as usize
    }

    /// Audio long enough to cover every frame window exactly.
    pub fn sample_count(&self) -> usize {
        (self.frame_count() as f64 * self.sample_rate / self.fps).round() as usize
    }
}

/// A control trajectory over `[0, duration]` seconds with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Control {
    knots: Vec<f64>,
    spacing: f64,
}

impl Control {
    pub fn new(family: &ControlFamily, duration: f64, rng: &mut impl Rng) -> Self {
        match *family {
            ControlFamily::Constant { value } => Self {
                knots: vec![value, value],
                spacing: duration.max(1e-9),
            },
            ControlFamily::RandomWalk { knots_per_second, step } => {
                let spacing = 1.0 / knots_per_second;
                let n = (duration / spacing).ceil() as usize + 2;
                let mut v: f64 = rng.random_range(0.0..1.0);
                let mut knots = Vec::with_capacity(n);
                for _ in 0..n {
                    knots.push(v);
                    v += rng.random_range(-step..=step);
                    // Reflect back into [0, 1].
                    if v < 0.0 {
                        v = -v;
                    }
                    if v > 1.0 {
                        v = 2.0 - v;
                    }
                    v = v.clamp(0.0, 1.0);
                }
                Self { knots, spacing }
            }
        }
    }

    /// Smoothstep interpolation between knots.
    pub fn at(&self, time: f64) -> f64 {
        let pos = (time / self.spacing).max(0.0);
        let i = (pos.floor() as usize).min(self.knots.len() - 2);
        let frac = (pos - i as f64).clamp(0.0, 1.0);
        let s = frac * frac * (3.0 - 2.0 * frac);
        self.knots[i] * (1.0 - s) + self.knots[i + 1] * s
    }
}

/// Renders one frame for an aperture (fraction of height).
pub fn render_frame(spec: &ToyWorldSpec, aperture: f64, palate_shift: f64) -> Frame {
    let (h, w) = spec.resolution;
    let mut data = vec![0.0f32; h * w];
    let ss = SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = (x as f64 + (sx as f64 + 0.5) / ss) / w as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / ss) / h as f64;
                    let palate = palate_edge(spec, u, palate_shift);
                    acc += if v < palate {
                        PALATE_LEVEL
                    } else if v < palate + aperture {
                        AIR_LEVEL
                    } else {
                        TONGUE_LEVEL
                    };
                }
            }
            data[y * w + x] = acc / (SUPERSAMPLE * SUPERSAMPLE) as f32;
        }
    }
    Frame {
        height: h,
        width: w,
        data,
    }
}

fn palate_edge(spec: &ToyWorldSpec, u: f64, shift: f64) -> f64 {
    spec.palate_base + shift + spec.palate_arch * (std::f64::consts::PI * u).sin()
}

/// Aperture in pixels at the centre column, from counting air pixels.
pub fn measure_aperture_px(frame: &Frame) -> f64 {
    let col = frame.width / 2;
    let threshold = (AIR_LEVEL + TONGUE_LEVEL) / 2.0;
    (0..frame.height)
        .filter(|&r| frame.get(r, col) < threshold)
        .count() as f64
}

pub fn aperture_for(spec: &ToyWorldSpec, control: f64) -> f64 {
    spec.aperture_min + (spec.aperture_max - spec.aperture_min) * control
}

/// Generates sample `index` of the toy world.
pub fn generate_sample(spec: &ToyWorldSpec, index: usize) -> Result<ToySample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let frames_n = spec.frame_count();
    let samples_n = spec.sample_count();
    let duration = samples_n as f64 / spec.sample_rate;
    let control = Control::new(&spec.control, duration, &mut rng);

    let speaker_idx = index % spec.speakers.len();
    let cohort = spec.cohorts[(index / spec.speakers.len()) % spec.cohorts.len()].clone();
    let words = (0..spec.words_per_sample)
        .map(|_| spec.vocabulary[rng.random_range(0..spec.vocabulary.len())].clone())
        .collect();

    let palate_shift = spec.speaker_palate_shift * speaker_idx as f64;
    let frame_controls: Vec<f64> = (0..frames_n)
        .map(|i| control.at((i as f64 + 0.5) / spec.fps))
        .collect();
    let frames = frame_controls
        .iter()
        .map(|&c| render_frame(spec, aperture_for(spec, c), palate_shift))
        .collect();

    let pitch_shift = spec.speaker_pitch_shift_hz * speaker_idx as f64;
    let mut phase = 0.0f64;
    let waveform = (0..samples_n)
        .map(|n| {
            let c = control.at(n as f64 / spec.sample_rate);
            let freq = spec.tone_min_hz + pitch_shift + (spec.tone_max_hz - spec.tone_min_hz) * c;
            let amp = spec.amp_min + (spec.amp_max - spec.amp_min) * c;
            let s = amp * phase.sin();
            phase = (phase + 2.0 * std::f64::consts::PI * freq / spec.sample_rate)
                % (2.0 * std::f64::consts::PI);
            s as f32
        })
        .collect();

    Ok(ToySample {
        id: format!("toy{index:05}"),
        speaker: spec.speakers[speaker_idx].clone(),
        words,
        cohort,
        frames,
        waveform,
        frame_controls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = ToyWorldSpec::default();
        assert_eq!(generate_sample(&spec, 3).unwrap(), generate_sample(&spec, 3).unwrap());
        assert_ne!(
            generate_sample(&spec, 3).unwrap().frames,
            generate_sample(&spec, 4).unwrap().frames
        );
    }

    #[test]
    fn constant_control_is_static() {
        let spec = ToyWorldSpec {
            control: ControlFamily::Constant { value: 0.5 },
            ..ToyWorldSpec::default()
        };
        let s = generate_sample(&spec, 0).unwrap();
        assert!(s.frames.windows(2).all(|p| p[0] == p[1]));
        // Constant tone: one amplitude envelope and one period.
        let peak = s.waveform.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let expected_amp = (spec.amp_min + spec.amp_max) / 2.0;
        assert!((peak as f64 - expected_amp).abs() < 1e-3);
        let crossings = s
            .waveform
            .windows(2)
            .filter(|p| p[0] <= 0.0 && p[1] > 0.0)
            .count() as f64;
        let freq = (spec.tone_min_hz + spec.tone_max_hz) / 2.0;
        let expected = freq * s.waveform.len() as f64 / spec.sample_rate;
        assert!((crossings - expected).abs() <= 1.0, "{crossings} vs {expected}");
    }

    #[test]
    fn shapes_follow_spec() {
        let spec = ToyWorldSpec::default();
        let s = generate_sample(&spec, 0).unwrap();
        assert_eq!(s.frames.len(), 26);
        assert_eq!(s.waveform.len(), 16000);
        assert!(s.frames.iter().all(|f| f.shape() == (32, 32)));
        assert!(s.waveform.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn invalid_geometry_rejected() {
        let spec = ToyWorldSpec {
            aperture_max: 0.9,
            ..ToyWorldSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}
