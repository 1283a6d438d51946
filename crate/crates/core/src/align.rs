//! Temporal alignment of a waveform with a frame sequence.
//!
//! Frame `k` owns the audio samples `[boundary(k), boundary(k + 1))` where
//! `boundary(k) = round(k * sample_rate / fps)`. Rounding the cumulative
//! position rather than using a fixed per-frame length keeps the drift below
//! half a sample for arbitrarily long clips. Each frame additionally gets a
//! bidirectional context segment spanning `context_windows` frame-windows
//! centred on it, zero-padded where it runs past the clip edges.

use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{common_shape, Frame};

/// A raw paired recording.
#[derive(Debug, Clone)]
pub struct MediaPair {
    pub frames: Vec<Frame>,
    pub waveform: Vec<f32>,
    pub fps: f64,
    pub sample_rate: f64,
}

impl MediaPair {
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("media pair has no frames".into()));
        }
        if self.waveform.is_empty() {
            return Err(Error::InvalidInput("media pair has no audio".into()));
        }
        check_rates(self.fps, self.sample_rate)?;
        common_shape(&self.frames)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentSpec {
    pub fps: f64,
    pub sample_rate: f64,
    /// Odd number of frame-windows in the bidirectional context.
    pub context_windows: usize,
    /// `(height, width)` after normalization.
    pub target_resolution: (usize, usize),
}

impl Default for AlignmentSpec {
    fn default() -> Self {
        Self {
            fps: 26.0,
            sample_rate: 16000.0,
            context_windows: 3,
            target_resolution: (128, 128),
        }
    }
}

impl AlignmentSpec {
    pub fn validate(&self) -> Result<()> {
        check_rates(self.fps, self.sample_rate)?;
        if self.context_windows == 0 || self.context_windows.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "context_windows must be odd and >= 1, got {}",
                self.context_windows
            )));
        }
        let (h, w) = self.target_resolution;
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("target resolution must be non-zero".into()));
        }
        Ok(())
    }

    /// Nominal samples per frame, `round(sample_rate / fps)`.
    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate / self.fps).round() as usize
    }

    /// Fixed length of every context buffer.
    pub fn context_len(&self) -> usize {
        self.context_windows * self.samples_per_frame()
    }

    pub fn half_context(&self) -> i64 {
        (self.context_windows / 2) as i64
    }

    /// Boundary for a possibly negative frame index.
    pub fn boundary(&self, k: i64) -> i64 {
        (k as f64 * self.sample_rate / self.fps).round() as i64
    }

    /// Number of whole frames covered by `n_samples` of audio.
    pub fn frames_for_samples(&self, n_samples: usize) -> usize {
        let mut f = (n_samples as f64 * self.fps / self.sample_rate).floor() as i64;
        while f > 0 && self.boundary(f) > n_samples as i64 {
            f -= 1;
        }
        while self.boundary(f + 1) <= n_samples as i64 {
            f += 1;
        }
        f.max(0) as usize
    }
}

fn check_rates(fps: f64, sample_rate: f64) -> Result<()> {
    if !(fps.is_finite() && fps > 0.0) || !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(Error::MismatchedRates(format!(
            "fps and sample_rate must be positive, got fps={fps}, sample_rate={sample_rate}"
        )));
    }
    Ok(())
}

/// One frame bound to its audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedWindow {
    pub frame_index: usize,
    pub center_segment: Range<usize>,
    /// May start below zero or run past the waveform; those samples are zeros.
    pub context_segment: Range<i64>,
    pub context_samples: Vec<f32>,
}

/// Sample-index boundaries `[b_0, ..., b_F]` for `frame_count` frames.
pub fn frame_boundaries(frame_count: usize, spec: &AlignmentSpec) -> Vec<usize> {
    (0..=frame_count as i64)
        .map(|k| spec.boundary(k) as usize)
        .collect()
}

/// Copies `range` out of `waveform` into a buffer of exactly `len` samples,
/// zero wherever the range leaves the waveform or is shorter than `len`.
pub fn padded_segment(waveform: &[f32], range: Range<i64>, len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    let n = waveform.len() as i64;
    for (slot, idx) in out.iter_mut().zip(range) {
        if (0..n).contains(&idx) {
            *slot = waveform[idx as usize];
        }
    }
    out
}

/// Aligns audio to frames for a waveform that need not match the video length.
pub fn align_waveform(
    waveform: &[f32],
    frame_count: usize,
    spec: &AlignmentSpec,
) -> Result<Vec<AlignedWindow>> {
    spec.validate()?;
    if frame_count == 0 {
        return Err(Error::InvalidInput("cannot align zero frames".into()));
    }
    let half = spec.half_context();
    let len = spec.context_len();
    Ok((0..frame_count)
        .map(|k| {
            let ki = k as i64;
            let center = spec.boundary(ki) as usize..spec.boundary(ki + 1) as usize;
            let context = spec.boundary(ki - half)..spec.boundary(ki + half + 1);
            let context_samples = padded_segment(waveform, context.clone(), len);
            AlignedWindow {
                frame_index: k,
                center_segment: center,
                context_segment: context,
                context_samples,
            }
        })
        .collect())
}

/// One `AlignedWindow` per frame of `pair`.
pub fn align(pair: &MediaPair, spec: &AlignmentSpec) -> Result<Vec<AlignedWindow>> {
    check_rates(pair.fps, pair.sample_rate)?;
    spec.validate()?;
    if pair.fps != spec.fps || pair.sample_rate != spec.sample_rate {
        return Err(Error::MismatchedRates(format!(
            "recording is {} fps / {} Hz but alignment expects {} fps / {} Hz",
            pair.fps, pair.sample_rate, spec.fps, spec.sample_rate
        )));
    }
    align_waveform(&pair.waveform, pair.frames.len(), spec)
}

/// Bilinear resize with half-pixel centres (no antialiasing).
pub fn resize_bilinear(frame: &Frame, height: usize, width: usize) -> Frame {
    if frame.height == height && frame.width == width {
        return frame.clone();
    }
    let sy = frame.height as f64 / height as f64;
    let sx = frame.width as f64 / width as f64;
    let axis = |dst: usize, scale: f64, src_len: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, fy) = axis(r, sy, frame.height);
        for c in 0..width {
            let (c0, c1, fx) = axis(c, sx, frame.width);
            let top = frame.get(r0, c0) as f64 * (1.0 - fx) + frame.get(r0, c1) as f64 * fx;
            let bot = frame.get(r1, c0) as f64 * (1.0 - fx) + frame.get(r1, c1) as f64 * fx;
            data.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    Frame {
        height,
        width,
        data,
    }
}

/// Resizes every frame to the target resolution and min-max rescales the clip
/// into `[0, 1]`. A constant clip maps to all zeros.
pub fn normalize_frames(pair: &MediaPair, spec: &AlignmentSpec) -> Result<MediaPair> {
    if pair.frames.is_empty() {
        return Err(Error::InvalidInput("cannot normalize an empty frame sequence".into()));
    }
    let (h, w) = spec.target_resolution;
    let mut frames: Vec<Frame> = pair
        .frames
        .iter()
        .map(|f| resize_bilinear(f, h, w))
        .collect();
    let (lo, hi) = frames
        .iter()
        .flat_map(|f| f.data.iter())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    for f in &mut frames {
        for v in &mut f.data {
            *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
        }
    }
    Ok(MediaPair {
        frames,
        waveform: pair.waveform.clone(),
        fps: pair.fps,
        sample_rate: pair.sample_rate,
    })
}

/// Writes the alignment manifest: a header line then one tab-separated record
/// per frame.
pub fn write_manifest<W: Write>(windows: &[AlignedWindow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "frame_index\tcenter_start\tcenter_end\tcontext_start\tcontext_end"
    )?;
    for w in windows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            w.frame_index,
            w.center_segment.start,
            w.center_segment.end,
            w.context_segment.start,
            w.context_segment.end
        )?;
    }
    Ok(())
}

/// One parsed manifest record: `(frame_index, center, context)`.
pub type ManifestRecord = (usize, Range<usize>, Range<i64>);

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Dataset(format!(
                "alignment manifest line {}: expected 5 fields",
                lineno + 1
            )));
        }
        let bad = |_| Error::Dataset(format!("alignment manifest line {}: bad number", lineno + 1));
        let u = |s: &str| s.parse::<usize>().map_err(bad);
        let i = |s: &str| s.parse::<i64>().map_err(bad);
        out.push((
            u(fields[0])?,
            u(fields[1])?..u(fields[2])?,
            i(fields[3])?..i(fields[4])?,
        ));
    }
    Ok(out)
}
