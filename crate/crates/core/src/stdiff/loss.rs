use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            format!("{what} {:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    Ok(())
}

/// One-step clean estimate `(z_t − √(1−ᾱ)·ε̂) / √ᾱ` for clip tensors
/// `(B, F, C, h, w)` with one `ᾱ` per clip.
pub fn denoised_estimate(z_t: &Tensor, pred_eps: &Tensor, alpha_bars: &[f64]) -> Result<Tensor> {
    same_shape(z_t, pred_eps, "noisy latents")?;
    let b = z_t.dim(0)?;
    if alpha_bars.len() != b {
        return Err(Error::shape(format!("{b} alpha bars"), alpha_bars.len()));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, z_t.rank() - 1));
    let column = |f: fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = alpha_bars.iter().map(|&a| f(a)).collect();
        Ok(Tensor::from_vec(v, shape.as_slice(), z_t.device())?.to_dtype(z_t.dtype())?)
    };
    let noise_scale = column(|a| (1.0 - a).sqrt())?;
    let inv_signal = column(|a| 1.0 / a.sqrt())?;
    Ok((z_t - pred_eps.broadcast_mul(&noise_scale)?)?.broadcast_mul(&inv_signal)?)
}

/// Noise-prediction MSE plus the temporal coherence penalty on successive
/// frame differences.
///
/// All tensors are `(B, F, C, h, w)`. The temporal term sums squared
/// mismatches over frames and elements and averages over clips:
/// `λ1 · mean((ε̂ − ε)²) + λ2 · (1/B) Σ_b Σ_{i≥1} ‖Δẑ_i − Δz_i‖²`.
pub fn composite_loss(
    pred_eps: &Tensor,
    true_eps: &Tensor,
    denoised: &Tensor,
    gt: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<Tensor> {
    composite_loss_weighted(pred_eps, true_eps, denoised, gt, lambda1, lambda2, None)
}

/// [`composite_loss`] with an optional per-clip weight on the temporal term.
pub fn composite_loss_weighted(
    pred_eps: &Tensor,
    true_eps: &Tensor,
    denoised: &Tensor,
    gt: &Tensor,
    lambda1: f64,
    lambda2: f64,
    clip_weights: Option<&[f64]>,
) -> Result<Tensor> {
    same_shape(pred_eps, true_eps, "predicted noise")?;
    same_shape(denoised, gt, "denoised latents")?;
    same_shape(pred_eps, denoised, "predicted noise")?;
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "loss weights must be >= 0, got {lambda1}, {lambda2}"
        )));
    }
    if pred_eps.rank() < 2 {
        return Err(Error::InvalidInput("clip tensors need (B, F, ...) axes".into()));
    }
    let recon = (pred_eps - true_eps)?.sqr()?.mean_all()?;
    let mut loss = (recon * lambda1)?;
    let (b, f) = (pred_eps.dim(0)?, pred_eps.dim(1)?);
    if let Some(w) = clip_weights {
        if w.len() != b || w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::shape(format!("{b} non-negative clip weights"), format!("{w:?}")));
        }
    }
    if lambda2 > 0.0 && f >= 2 {
        let delta = |x: &Tensor| -> candle_core::Result<Tensor> {
            x.narrow(1, 1, f - 1)? - x.narrow(1, 0, f - 1)?
        };
        let per_clip = (delta(denoised)? - delta(gt)?)?.sqr()?.flatten_from(1)?.sum(1)?;
        let temporal = match clip_weights {
            Some(w) => {
                let w = Tensor::from_slice(w, b, pred_eps.device())?.to_dtype(pred_eps.dtype())?;
                (per_clip * w)?.sum_all()?
            }
            None => per_clip.sum_all()?,
        };
        loss = (loss + (temporal * (lambda2 / b as f64))?)?;
    }
    Ok(loss)
}

/// Scalar value of a loss tensor.
pub fn loss_value(loss: &Tensor) -> Result<f64> {
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
