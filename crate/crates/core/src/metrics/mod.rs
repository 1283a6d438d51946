//! Frame and video quality metrics: SSIM, PSNR, KID and FVD.
//!
//! SSIM and PSNR compare frames pairwise. KID and FVD compare two sets of
//! clip features produced by a [`VideoFeatureExtractor`].

mod distribution;
mod features;
mod report;

pub use distribution::{fvd, kid, FeatureSet, FVD_REGULARIZER};
pub use features::{extract_video_features, ExtractorKind, VideoFeatureExtractor};
pub use report::{evaluate_videos, parse_report, write_report, Direction, EvalConfig, MeanStd, MetricReport, ModelRow};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    /// Odd Gaussian window size; shrunk to the largest odd size that fits
    /// smaller images.
    pub window: usize,
    pub sigma: f64,
    pub max_value: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            max_value: 1.0,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

fn check_pair(x: &Frame, y: &Frame) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(
            format!("{}x{}", x.height, x.width),
            format!("{}x{}", y.height, y.width),
        ));
    }
    if x.data.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    Ok(())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Window size actually used for an `h × w` image.
pub fn effective_window(params: &SsimParams, h: usize, w: usize) -> usize {
    let mut win = params.window.min(h).min(w);
    if win.is_multiple_of(2) {
        win -= 1;
    }
    win.max(1)
}

/// Separable valid-region filtering.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over the valid region.
pub fn ssim(x: &Frame, y: &Frame, params: &SsimParams) -> Result<f64> {
    check_pair(x, y)?;
    if params.window == 0 || params.window.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!("SSIM window must be odd, got {}", params.window)));
    }
    let (h, w) = x.shape();
    let win = effective_window(params, h, w);
    let taps = gaussian_window(win, params.sigma);
    let xs: Vec<f64> = x.data.iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.data.iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let (mx, oh, ow) = filter_valid(&xs, h, w, &taps);
    let (my, _, _) = filter_valid(&ys, h, w, &taps);
    let (sxx, _, _) = filter_valid(&prod(&xs, &xs), h, w, &taps);
    let (syy, _, _) = filter_valid(&prod(&ys, &ys), h, w, &taps);
    let (sxy, _, _) = filter_valid(&prod(&xs, &ys), h, w, &taps);
    let c1 = (params.k1 * params.max_value).powi(2);
    let c2 = (params.k2 * params.max_value).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (oh * ow) as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Frame, y: &Frame, max_value: f64) -> Result<f64> {
    check_pair(x, y)?;
    if !(max_value > 0.0) {
        return Err(Error::InvalidInput("PSNR max_value must be > 0".into()));
    }
    let mse = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB))
}
