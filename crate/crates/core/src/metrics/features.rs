use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distribution::FeatureSet;
use crate::error::{Error, Result};
use crate::frame::{common_shape, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Fixed-seed random 3-D convolutions; deterministic and offline.
    Toy3dConv,
    /// 3-D convolution weights read from a safetensors snapshot.
    Pretrained3d,
}

#[derive(Debug, Clone)]
struct Conv3d {
    out_c: usize,
    in_c: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    /// `(out, in, kt, kh, kw)`.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv3d {
    fn output_len(len: usize, k: usize, s: usize) -> usize {
        let pad = k / 2;
        if len + 2 * pad < k {
            return 0;
        }
        (len + 2 * pad - k) / s + 1
    }

    /// Zero-padded ("same" before striding) convolution followed by ReLU.
    /// Input and output are `(C, T, H, W)`.
    fn forward(&self, x: &[f32], dims: [usize; 3]) -> (Vec<f32>, [usize; 3]) {
        let [t, h, w] = dims;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.stride;
        let (ot, oh, ow) = (
            Self::output_len(t, kt, st),
            Self::output_len(h, kh, sh),
            Self::output_len(w, kw, sw),
        );
        let (pt, ph, pw) = ((kt / 2) as isize, (kh / 2) as isize, (kw / 2) as isize);
        let mut out = vec![0.0f32; self.out_c * ot * oh * ow];
        for o in 0..self.out_c {
            for zt in 0..ot {
                for zy in 0..oh {
                    for zx in 0..ow {
                        let mut acc = self.bias[o];
                        for c in 0..self.in_c {
                            for dt in 0..kt {
                                let it = (zt * st + dt) as isize - pt;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for dy in 0..kh {
                                    let iy = (zy * sh + dy) as isize - ph;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let wrow = (((o * self.in_c + c) * kt + dt) * kh + dy) * kw;
                                    let xrow = ((c * t + it as usize) * h + iy as usize) * w;
                                    for dx in 0..kw {
                                        let ix = (zx * sw + dx) as isize - pw;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += self.weight[wrow + dx] * x[xrow + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((o * ot + zt) * oh + zy) * ow + zx] = acc.max(0.0);
                    }
                }
            }
        }
        (out, [ot, oh, ow])
    }
}

/// Maps a clip of frames to a fixed-length feature vector: a stack of 3-D
/// convolutions, then per-channel mean and standard deviation pooling.
#[derive(Debug, Clone)]
pub struct VideoFeatureExtractor {
    layers: Vec<Conv3d>,
    id: String,
}

const TOY_CHANNELS: [usize; 3] = [1, 8, 16];

impl VideoFeatureExtractor {
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = TOY_CHANNELS
            .windows(2)
            .map(|io| {
                let (in_c, out_c) = (io[0], io[1]);
                let fan_in = in_c * 27;
                let bound = (6.0 / fan_in as f32).sqrt();
                Conv3d {
                    out_c,
                    in_c,
                    kernel: [3, 3, 3],
                    stride: [1, 2, 2],
                    weight: (0..out_c * fan_in).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; out_c],
                }
            })
            .collect();
        Self {
            layers,
            id: format!("toy-3dconv:{seed}"),
        }
    }

    /// Loads `layers.{i}.weight` `(out, in, kt, kh, kw)` and optional
    /// `layers.{i}.bias` tensors; every layer uses stride `(1, 2, 2)`.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let read_f32 = |name: &str| -> Result<Option<(Vec<usize>, Vec<f32>)>> {
            match st.tensor(name) {
                Ok(view) => {
                    if view.dtype() != safetensors::Dtype::F32 {
                        return Err(Error::Checkpoint(format!("{name}: expected f32")));
                    }
                    let data = view
                        .data()
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect();
                    Ok(Some((view.shape().to_vec(), data)))
                }
                Err(_) => Ok(None),
            }
        };
        let mut layers = Vec::new();
        let mut prev_out = 1;
        while let Some((shape, weight)) = read_f32(&format!("layers.{}.weight", layers.len()))? {
            if shape.len() != 5 || shape[1] != prev_out {
                return Err(Error::Checkpoint(format!(
                    "layer {} weight shape {shape:?} does not follow {prev_out} channels",
                    layers.len()
                )));
            }
            let bias = match read_f32(&format!("layers.{}.bias", layers.len()))? {
                Some((bshape, b)) if bshape == [shape[0]] => b,
                Some((bshape, _)) => return Err(Error::shape(shape[0], format!("{bshape:?}"))),
                None => vec![0.0; shape[0]],
            };
            prev_out = shape[0];
            layers.push(Conv3d {
                out_c: shape[0],
                in_c: shape[1],
                kernel: [shape[2], shape[3], shape[4]],
                stride: [1, 2, 2],
                weight,
                bias,
            });
        }
        if layers.is_empty() {
            return Err(Error::Checkpoint(format!("{}: no layers.0.weight", path.display())));
        }
        let digest = crate::harness::dataset::sha256_hex(&bytes);
        Ok(Self {
            layers,
            id: format!("pretrained-3d:{}", &digest[..12]),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        2 * self.layers.last().map_or(1, |l| l.out_c)
    }

    pub fn features(&self, clip: &[Frame]) -> Result<Vec<f64>> {
        let (h, w) = common_shape(clip)?;
        let mut x: Vec<f32> = clip.iter().flat_map(|f| f.data.iter().copied()).collect();
        let mut dims = [clip.len(), h, w];
        for layer in &self.layers {
            let (y, d) = layer.forward(&x, dims);
            if d.contains(&0) {
                return Err(Error::InvalidInput(format!("clip {:?} too small for extractor", [clip.len(), h, w])));
            }
            x = y;
            dims = d;
        }
        let per = dims.iter().product::<usize>();
        let mut out = Vec::with_capacity(self.dim());
        let channels: Vec<&[f32]> = x.chunks_exact(per).collect();
        for c in &channels {
            out.push(c.iter().map(|&v| v as f64).sum::<f64>() / per as f64);
        }
        for (c, mean) in channels.iter().zip(out.clone()) {
            let var = c.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
            out.push(var.sqrt());
        }
        Ok(out)
    }
}

impl ExtractorKind {
    pub fn build(self, seed: u64, weights: Option<&Path>) -> Result<VideoFeatureExtractor> {
        match (self, weights) {
            (Self::Toy3dConv, _) => Ok(VideoFeatureExtractor::toy(seed)),
            (Self::Pretrained3d, Some(p)) => VideoFeatureExtractor::from_safetensors(p),
            (Self::Pretrained3d, None) => Err(Error::Config(
                "pretrained-3d extractor needs a weights path".into(),
            )),
        }
    }
}

/// Features for every clip, computed in parallel.
pub fn extract_video_features(clips: &[Vec<Frame>], extractor: &VideoFeatureExtractor) -> Result<FeatureSet> {
    let rows: Vec<Vec<f64>> = clips
        .par_iter()
        .map(|c| extractor.features(c))
        .collect::<Result<_>>()?;
    let d = extractor.dim();
    FeatureSet::new(rows.len(), d, rows.concat(), extractor.id())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(seed: u64, f: usize) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..f)
            .map(|_| Frame::new(16, 16, (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn toy_extractor_is_deterministic() {
        let a = VideoFeatureExtractor::toy(3);
        let b = VideoFeatureExtractor::toy(3);
        let c = clip(1, 5);
        assert_eq!(a.features(&c).unwrap(), b.features(&c).unwrap());
        assert_eq!(a.features(&c).unwrap().len(), a.dim());
        assert_ne!(VideoFeatureExtractor::toy(4).features(&c).unwrap(), a.features(&c).unwrap());
    }

    #[test]
    fn conv_matches_direct_sum_at_one_position() {
        let ex = VideoFeatureExtractor::toy(9);
        let layer = &ex.layers[0];
        let c = clip(2, 4);
        let x: Vec<f32> = c.iter().flat_map(|f| f.data.clone()).collect();
        let (y, dims) = layer.forward(&x, [4, 16, 16]);
        assert_eq!(dims, [4, 8, 8]);
        // Output (o=2, t=1, y=3, x=5) reads input rows t 0..=2, y 5..=7, x 9..=11.
        let mut acc = 0.0f32;
        for dt in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += layer.weight[((2 * 3 + dt) * 3 + dy) * 3 + dx] * c[dt].get(5 + dy, 9 + dx);
                }
            }
        }
        assert!((y[((2 * 4 + 1) * 8 + 3) * 8 + 5] - acc.max(0.0)).abs() < 1e-5);
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let mut c = clip(3, 3);
        c.push(Frame::filled(8, 8, 0.0));
        assert!(VideoFeatureExtractor::toy(0).features(&c).is_err());
    }

    #[test]
    fn pretrained_kind_needs_weights() {
        assert!(ExtractorKind::Pretrained3d.build(0, None).is_err());
    }
}
