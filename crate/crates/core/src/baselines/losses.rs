use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// Summed squared error over every pixel of every frame.
pub fn reconst_loss(decoded: &[Frame], gt: &[Frame]) -> Result<f64> {
    if decoded.len() != gt.len() {
        return Err(Error::shape(format!("{} frames", gt.len()), decoded.len()));
    }
    let mut total = 0.0;
    for (a, b) in decoded.iter().zip(gt) {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!("{:?}", b.shape()), format!("{:?}", a.shape())));
        }
        total += a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>();
    }
    Ok(total)
}

/// Differentiable [`reconst_loss`] over tensors of equal shape.
pub fn reconst_loss_tensor(decoded: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if decoded.dims() != gt.dims() {
        return Err(Error::shape(format!("{:?}", gt.dims()), format!("{:?}", decoded.dims())));
    }
    Ok((decoded - gt)?.sqr()?.sum_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    /// Hinge margin for negative pairs.
    pub margin: f64,
    /// Weight of the reconstruction term.
    pub lambda1: f64,
    /// Weight of the contrastive term.
    pub lambda2: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            lambda1: 1.0,
            lambda2: 0.1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "contrastive margin and weights must be >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// An image embedding, a speech embedding, and whether they belong together.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticPair {
    pub image_embedding: Vec<f32>,
    pub speech_embedding: Vec<f32>,
    pub positive: bool,
}

fn pair_term(d: f64, positive: bool, margin: f64) -> f64 {
    if positive {
        0.5 * d * d
    } else {
        0.5 * (margin - d).max(0.0).powi(2)
    }
}

/// Σ over pairs of `½d²` for positives and `½max(0, m − d)²` for negatives,
/// with `d` the Euclidean distance between the two embeddings.
pub fn contrastive_loss(pairs: &[SemanticPair], config: &ContrastiveConfig) -> Result<f64> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("contrastive loss needs at least one pair".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        if p.image_embedding.len() != p.speech_embedding.len() {
            return Err(Error::shape(p.image_embedding.len(), p.speech_embedding.len()));
        }
        let d = p
            .image_embedding
            .iter()
            .zip(&p.speech_embedding)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        total += pair_term(d, p.positive, config.margin);
    }
    Ok(total)
}

/// Differentiable contrastive loss over `(N, D)` embedding batches.
pub fn contrastive_loss_tensor(
    image: &Tensor,
    speech: &Tensor,
    positive: &[bool],
    margin: f64,
) -> Result<Tensor> {
    if image.dims() != speech.dims() || image.rank() != 2 {
        return Err(Error::shape(format!("{:?}", image.dims()), format!("{:?}", speech.dims())));
    }
    let n = image.dim(0)?;
    if positive.len() != n || n == 0 {
        return Err(Error::shape(format!("{n} pair labels"), positive.len()));
    }
    let sq = (image - speech)?.sqr()?.sum(D::Minus1)?;
    let mut total = None::<Tensor>;
    let pos_mask: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    if positive.iter().any(|&p| p) {
        let mask = Tensor::from_vec(pos_mask.clone(), n, image.device())?.to_dtype(image.dtype())?;
        total = Some(((&sq * &mask)?.sum_all()? * 0.5)?);
    }
    if positive.iter().any(|&p| !p) {
        let neg: Vec<f64> = pos_mask.iter().map(|m| 1.0 - m).collect();
        let mask = Tensor::from_vec(neg, n, image.device())?.to_dtype(image.dtype())?;
        // A small floor keeps the sqrt differentiable at zero distance.
        let d = (sq + 1e-12)?.sqrt()?;
        let hinge = d.affine(-1.0, margin)?.relu()?.sqr()?;
        let neg_total = ((hinge * mask)?.sum_all()? * 0.5)?;
        total = Some(match total {
            Some(t) => (t + neg_total)?,
            None => neg_total,
        });
    }
    Ok(total.expect("n > 0"))
}

/// `λ1·reconst + λ2·contrastive`.
pub fn combined_loss(reconst: f64, contrastive: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * reconst + lambda2 * contrastive
}

pub fn combined_loss_tensor(reconst: &Tensor, contrastive: &Tensor, lambda1: f64, lambda2: f64) -> Result<Tensor> {
    Ok(((reconst * lambda1)? + (contrastive * lambda2)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DEVICE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(a: &[f32], b: &[f32], positive: bool) -> SemanticPair {
        SemanticPair {
            image_embedding: a.to_vec(),
            speech_embedding: b.to_vec(),
            positive,
        }
    }

    #[test]
    fn reconst_cases() {
        let a = Frame::new(1, 1, vec![0.2]).unwrap();
        let b = Frame::new(1, 1, vec![0.5]).unwrap();
        assert!((reconst_loss(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap() - 0.09).abs() < 1e-7);
        assert_eq!(reconst_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        assert!(reconst_loss(std::slice::from_ref(&a), &[]).is_err());
        assert!(reconst_loss(&[a], &[Frame::filled(2, 1, 0.0)]).is_err());
    }

    #[test]
    fn reconst_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = || Frame::new(4, 4, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let (x, y) = (f(), f());
        let mut oracle = 0.0f64;
        for r in 0..4 {
            for c in 0..4 {
                let d = x.get(r, c) as f64 - y.get(r, c) as f64;
                oracle += d * d;
            }
        }
        assert!((reconst_loss(std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap() - oracle).abs() < 1e-12);
        let t = |f: &Frame| Tensor::from_vec(f.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), (4, 4), &DEVICE).unwrap();
        let tl = reconst_loss_tensor(&t(&x), &t(&y)).unwrap().to_scalar::<f64>().unwrap();
        assert!((tl - oracle).abs() < 1e-12);
    }

    #[test]
    fn contrastive_cases() {
        let cfg = ContrastiveConfig::default();
        assert_eq!(contrastive_loss(&[pair(&[1.0, 2.0], &[1.0, 2.0], true)], &cfg).unwrap(), 0.0);
        // Negative pair already beyond the margin.
        assert_eq!(contrastive_loss(&[pair(&[0.0, 0.0], &[3.0, 4.0], false)], &cfg).unwrap(), 0.0);
        let m2 = ContrastiveConfig {
            margin: 2.0,
            ..cfg
        };
        let v = contrastive_loss(&[pair(&[0.0, 0.0], &[1.0, 0.0], false)], &m2).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!(contrastive_loss(&[pair(&[0.0], &[1.0, 0.0], true)], &cfg).is_err());
        assert!(contrastive_loss(&[], &cfg).is_err());
    }

    #[test]
    fn all_positive_reduces_to_half_squared_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs: Vec<SemanticPair> = (0..8)
            .map(|_| {
                let a: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let b: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                pair(&a, &b, true)
            })
            .collect();
        let half_sq: f64 = pairs
            .iter()
            .map(|p| {
                0.5 * p
                    .image_embedding
                    .iter()
                    .zip(&p.speech_embedding)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let v = contrastive_loss(&pairs, &ContrastiveConfig::default()).unwrap();
        assert!((v - half_sq).abs() < 1e-12);
    }

    #[test]
    fn tensor_form_matches_slice_form() {
        let rows_a = [[0.0f64, 0.0], [1.0, 1.0], [0.5, -0.5]];
        let rows_b = [[1.0f64, 0.0], [1.0, 2.0], [0.0, 0.0]];
        let labels = [false, true, false];
        let ta = Tensor::from_vec(rows_a.concat(), (3, 2), &DEVICE).unwrap();
        let tb = Tensor::from_vec(rows_b.concat(), (3, 2), &DEVICE).unwrap();
        let t = contrastive_loss_tensor(&ta, &tb, &labels, 2.0).unwrap().to_scalar::<f64>().unwrap();
        let pairs: Vec<SemanticPair> = (0..3)
            .map(|i| {
                let a: Vec<f32> = rows_a[i].iter().map(|&v| v as f32).collect();
                let b: Vec<f32> = rows_b[i].iter().map(|&v| v as f32).collect();
                pair(&a, &b, labels[i])
            })
            .collect();
        let cfg = ContrastiveConfig {
            margin: 2.0,
            ..ContrastiveConfig::default()
        };
        assert!((t - contrastive_loss(&pairs, &cfg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn combined_arithmetic() {
        assert_eq!(combined_loss(2.0, 3.0, 0.0, 0.0), 0.0);
        assert_eq!(combined_loss(2.0, 3.0, 1.0, 0.5), 3.5);
    }
}
