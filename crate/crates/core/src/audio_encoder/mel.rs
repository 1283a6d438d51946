use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{BackendKind, EncoderBackend};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyMelConfig {
    pub sample_rate: f64,
    pub expected_input_samples: usize,
    /// Number of analysis frames spread evenly over the input.
    pub rows: usize,
    /// Embedding width; mel bands beyond `n_mels` are zero.
    pub cols: usize,
    pub n_mels: usize,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for ToyMelConfig {
    /// Sized for a three-window context at 26 fps / 16 kHz.
    fn default() -> Self {
        Self {
            sample_rate: 16000.0,
            expected_input_samples: 1845,
            rows: 12,
            cols: 32,
            n_mels: 32,
            n_fft: 256,
            f_min: 50.0,
            f_max: 4000.0,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Weight-free log-mel filterbank encoder.
pub struct ToyMel {
    config: ToyMelConfig,
    window: Vec<f64>,
    /// `n_mels × (n_fft / 2 + 1)` triangular filters.
    filters: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for ToyMel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyMel").field("config", &self.config).finish()
    }
}

impl ToyMel {
    pub fn new(config: ToyMelConfig) -> Result<Self> {
        let c = &config;
        if c.rows == 0 || c.cols == 0 || c.n_mels == 0 || c.n_fft < 2 {
            return Err(Error::Config("toy-mel dimensions must be positive".into()));
        }
        if c.n_mels > c.cols {
            return Err(Error::Config(format!(
                "toy-mel n_mels ({}) exceeds embedding width ({})",
                c.n_mels, c.cols
            )));
        }
        if !(c.f_min >= 0.0 && c.f_min < c.f_max && c.f_max <= c.sample_rate / 2.0) {
            return Err(Error::Config("toy-mel needs 0 <= f_min < f_max <= nyquist".into()));
        }
        let window = (0..c.n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / c.n_fft as f64).cos())
            .collect();
        let filters = mel_filters(c);
        let fft = FftPlanner::new().plan_fft_forward(c.n_fft);
        Ok(Self {
            config,
            window,
            filters,
            fft,
        })
    }

    pub fn config(&self) -> &ToyMelConfig {
        &self.config
    }

    /// Centre frequency of each mel band.
    pub fn band_centers(&self) -> Vec<f64> {
        let c = &self.config;
        let (lo, hi) = (hz_to_mel(c.f_min), hz_to_mel(c.f_max));
        (1..=c.n_mels)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (c.n_mels + 1) as f64))
            .collect()
    }

    /// Start sample of each analysis frame.
    pub fn frame_starts(&self) -> Vec<usize> {
        let c = &self.config;
        let span = c.expected_input_samples.saturating_sub(c.n_fft);
        if c.rows == 1 {
            return vec![span / 2];
        }
        (0..c.rows)
            .map(|r| (r as f64 * span as f64 / (c.rows - 1) as f64).round() as usize)
            .collect()
    }
}

fn mel_filters(c: &ToyMelConfig) -> Vec<Vec<f64>> {
    let bins = c.n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(c.f_min), hz_to_mel(c.f_max));
    let points: Vec<f64> = (0..c.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (c.n_mels + 1) as f64))
        .collect();
    (0..c.n_mels)
        .map(|m| {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * c.sample_rate / c.n_fft as f64;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

impl EncoderBackend for ToyMel {
    fn kind(&self) -> BackendKind {
        BackendKind::ToyMel
    }

    fn id(&self) -> String {
        let c = &self.config;
        format!(
            "toy-mel:sr{}:n{}:r{}:c{}:m{}:fft{}:f{}-{}",
            c.sample_rate, c.expected_input_samples, c.rows, c.cols, c.n_mels, c.n_fft, c.f_min, c.f_max
        )
    }

    fn expected_input_samples(&self) -> usize {
        self.config.expected_input_samples
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.config.rows, self.config.cols)
    }

    fn forward(&self, waveform: &[f32]) -> Result<Vec<f32>> {
        let c = &self.config;
        let bins = c.n_fft / 2 + 1;
        let mut out = vec![0.0f32; c.rows * c.cols];
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        for (r, start) in self.frame_starts().into_iter().enumerate() {
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = waveform.get(start + i).copied().unwrap_or(0.0) as f64;
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..bins].iter().map(|z| z.norm_sqr()).collect();
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[r * c.cols + m] = (e + 1e-6).ln() as f32;
            }
        }
        Ok(out)
    }
}
