//! Small building blocks shared by the trainable models.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;

/// Re-initializes every matrix/kernel in `varmap` from a seeded generator.
///
/// Rank-1 parameters named `*bias` are zeroed, other rank-1 parameters (norm
/// scales) keep their builder defaults. Higher-rank tensors get `U(-1/√fan_in, 1/√fan_in)`, except
/// names containing `zero_init` which start at zero. Variables are visited in
/// name order so the result only depends on the seed.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        if dims.len() < 2 {
            if name.ends_with("bias") {
                var.set(&var.zeros_like()?)?;
            }
            continue;
        }
        let n: usize = dims.iter().product();
        let values: Vec<f32> = if name.contains("zero_init") {
            vec![0.0; n]
        } else {
            let fan_in: usize = dims[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect()
        };
        var.set(&Tensor::from_vec(values, dims.as_slice(), &DEVICE)?)?;
    }
    Ok(())
}

/// Adam with the usual moment parameters and no weight decay.
pub fn adam(varmap: &VarMap, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..ParamsAdamW::default()
    };
    Ok(AdamW::new(varmap.all_vars(), params)?)
}

/// Sinusoidal embedding of integer timesteps, shape `(len, dim)`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), &DEVICE)?)
}

/// Multi-head scaled dot-product attention; inputs `(B, L, C)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    let hd = c / heads;
    let split = |x: &Tensor, l: usize| -> candle_core::Result<Tensor> {
        x.reshape((b, l, heads, hd))?.transpose(1, 2)?.contiguous()
    };
    let (q, k, v) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = probs.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, lq, c))?)
}

/// Aborts training with a diagnostic on a non-finite loss.
pub fn ensure_finite(loss: f64, step: usize, context: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            loss,
            context: context.to_string(),
        })
    }
}

/// Takes an optimizer step and returns the scalar loss.
pub fn backward_step(opt: &mut AdamW, loss: &Tensor, step: usize, context: &str) -> Result<f64> {
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    ensure_finite(value, step, context)?;
    opt.backward_step(loss)?;
    Ok(value)
}

/// Mean squared error between two tensors of equal shape.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Snapshot of every variable, used to compare parameters before/after updates.
pub fn snapshot(varmap: &VarMap) -> Result<Vec<(String, Vec<f32>)>> {
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut out: Vec<(String, Vec<f32>)> = data
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.flatten_all()?.to_vec1::<f32>()?)))
        .collect::<candle_core::Result<_>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::{VarBuilder, Module};

    fn build(seed: u64) -> (VarMap, candle_nn::Linear) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &DEVICE);
        let lin = candle_nn::linear(8, 4, vb.pp("lin")).unwrap();
        let _z = candle_nn::linear(4, 4, vb.pp("out_zero_init")).unwrap();
        seeded_init(&vm, seed).unwrap();
        (vm, lin)
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let (a, _) = build(5);
        let (b, _) = build(5);
        let (c, _) = build(6);
        assert_eq!(snapshot(&a).unwrap(), snapshot(&b).unwrap());
        assert_ne!(snapshot(&a).unwrap(), snapshot(&c).unwrap());
        let snap = snapshot(&a).unwrap();
        let zero = snap.iter().find(|(k, _)| k == "out_zero_init.weight").unwrap();
        assert!(zero.1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_output_shape() {
        let (_, lin) = build(1);
        let x = Tensor::ones((2, 5, 8), DType::F32, &DEVICE).unwrap();
        let q = lin.forward(&x).unwrap();
        let kv = Tensor::ones((2, 3, 4), DType::F32, &DEVICE).unwrap();
        let out = attention(&q, &kv, &kv, 2).unwrap();
        assert_eq!(out.dims(), &[2, 5, 4]);
    }

    #[test]
    fn timestep_embedding_layout() {
        let e = timestep_embedding(&[0, 10], 6).unwrap();
        let v = e.to_vec2::<f32>().unwrap();
        assert_eq!(&v[0][..3], &[1.0, 1.0, 1.0]);
        assert_eq!(&v[0][3..], &[0.0, 0.0, 0.0]);
        assert!((v[1][3] - 10f32.sin()).abs() < 1e-6);
    }

    #[test]
    fn divergence_is_reported() {
        assert!(matches!(
            ensure_finite(f64::NAN, 3, "test"),
            Err(Error::Divergence { step: 3, .. })
        ));
    }
}
