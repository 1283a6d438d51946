use std::fmt;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distribution::{fvd, kid, FeatureSet};
use super::features::{extract_video_features, ExtractorKind, VideoFeatureExtractor};
use super::{psnr, ssim, SsimParams};
use crate::error::{Error, Result};
use crate::frame::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample mean and (n−1) standard deviation; zero spread for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

impl std::str::FromStr for MeanStd {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (m, sd) = s
            .split_once('±')
            .ok_or_else(|| Error::InvalidInput(format!("expected 'mean ± std', got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("{v:?}: {e}")))
        };
        Ok(Self {
            mean: parse(m)?,
            std: parse(sd)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub kid: MeanStd,
    pub fvd: MeanStd,
    pub ssim: MeanStd,
    pub psnr: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub rows: Vec<ModelRow>,
}

impl MetricReport {
    pub const COLUMNS: [(&'static str, Direction); 4] = [
        ("KID", Direction::LowerIsBetter),
        ("FVD", Direction::LowerIsBetter),
        ("SSIM", Direction::HigherIsBetter),
        ("PSNR", Direction::HigherIsBetter),
    ];

    pub fn direction(metric: &str) -> Option<Direction> {
        Self::COLUMNS
            .iter()
            .find(|(name, _)| name.eq_ignore_ascii_case(metric))
            .map(|&(_, d)| d)
    }

    pub fn row(&self, model: &str) -> Option<&ModelRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

fn header() -> String {
    let mut cols = vec!["model".to_string()];
    for (name, dir) in MetricReport::COLUMNS {
        let arrow = match dir {
            Direction::LowerIsBetter => "↓",
            Direction::HigherIsBetter => "↑",
        };
        cols.push(format!("{name} ({arrow})"));
    }
    cols.join("\t")
}

/// Tab-separated table, one row per model, cells formatted `mean ± std`.
pub fn write_report(report: &MetricReport) -> String {
    let mut out = header();
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.model, r.kid, r.fvd, r.ssim, r.psnr));
    }
    out
}

pub fn parse_report(text: &str) -> Result<MetricReport> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim_end() == header() => {}
        other => {
            return Err(Error::InvalidInput(format!("unexpected report header {other:?}")));
        }
    }
    let rows = lines
        .map(|line| {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != 5 {
                return Err(Error::InvalidInput(format!("report row needs 5 cells: {line:?}")));
            }
            Ok(ModelRow {
                model: cells[0].to_string(),
                kid: cells[1].parse()?,
                fvd: cells[2].parse()?,
                ssim: cells[3].parse()?,
                psnr: cells[4].parse()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ssim: SsimParams,
    pub psnr_max: f64,
    /// Videos are cut into non-overlapping clips of this many frames for the
    /// distribution metrics; shorter videos count as one clip.
    pub clip_len: usize,
    /// Disjoint subsets used for the KID and FVD spread.
    pub subsets: usize,
    pub extractor: ExtractorKind,
    pub extractor_seed: u64,
    pub extractor_weights: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ssim: SsimParams::default(),
            psnr_max: 1.0,
            clip_len: 16,
            subsets: 5,
            extractor: ExtractorKind::Toy3dConv,
            extractor_seed: 0,
            extractor_weights: None,
        }
    }
}

impl EvalConfig {
    pub fn extractor(&self) -> Result<VideoFeatureExtractor> {
        self.extractor
            .build(self.extractor_seed, self.extractor_weights.as_deref())
    }
}

fn split_clips(videos: &[Vec<Frame>], clip_len: usize) -> Vec<Vec<Frame>> {
    let mut clips = Vec::new();
    for v in videos {
        if v.len() <= clip_len {
            clips.push(v.clone());
        } else {
            clips.extend(v.chunks_exact(clip_len).map(|c| c.to_vec()));
        }
    }
    clips
}

/// Full-set value plus spread across disjoint round-robin subsets.
fn distribution_metric(
    a: &FeatureSet,
    b: &FeatureSet,
    subsets: usize,
    metric: fn(&FeatureSet, &FeatureSet) -> Result<f64>,
) -> Result<MeanStd> {
    let value = metric(a, b)?;
    let k = subsets.min(a.n / 2);
    if k < 2 {
        return Ok(MeanStd { mean: value, std: 0.0 });
    }
    let parts: Vec<f64> = (0..k)
        .map(|s| {
            let idx: Vec<usize> = (s..a.n).step_by(k).collect();
            metric(&a.select(&idx), &b.select(&idx))
        })
        .collect::<Result<_>>()?;
    Ok(MeanStd {
        mean: value,
        std: MeanStd::of(&parts).std,
    })
}

/// Scores generated videos against paired ground truth.
pub fn evaluate_videos(
    model: &str,
    generated: &[Vec<Frame>],
    reference: &[Vec<Frame>],
    extractor: &VideoFeatureExtractor,
    config: &EvalConfig,
) -> Result<ModelRow> {
    if generated.len() != reference.len() {
        return Err(Error::shape(
            format!("{} reference videos", reference.len()),
            generated.len(),
        ));
    }
    if generated.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    if config.clip_len == 0 {
        return Err(Error::Config("clip_len must be >= 1".into()));
    }
    let per_video: Vec<(f64, f64)> = generated
        .par_iter()
        .zip(reference)
        .map(|(g, r)| {
            if g.len() != r.len() || g.is_empty() {
                return Err(Error::shape(format!("{} frames", r.len()), g.len()));
            }
            let mut s = 0.0;
            let mut p = 0.0;
            for (x, y) in g.iter().zip(r) {
                s += ssim(x, y, &config.ssim)?;
                p += psnr(x, y, config.psnr_max)?;
            }
            Ok((s / g.len() as f64, p / g.len() as f64))
        })
        .collect::<Result<_>>()?;
    let ssims: Vec<f64> = per_video.iter().map(|v| v.0).collect();
    let psnrs: Vec<f64> = per_video.iter().map(|v| v.1).collect();

    let fa = extract_video_features(&split_clips(generated, config.clip_len), extractor)?;
    let fb = extract_video_features(&split_clips(reference, config.clip_len), extractor)?;
    Ok(ModelRow {
        model: model.to_string(),
        kid: distribution_metric(&fa, &fb, config.subsets, kid)?,
        fvd: distribution_metric(&fa, &fb, config.subsets, fvd)?,
        ssim: MeanStd::of(&ssims),
        psnr: MeanStd::of(&psnrs),
    })
}
