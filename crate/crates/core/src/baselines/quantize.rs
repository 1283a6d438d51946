use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::DEVICE;

pub const CODEBOOK_SIZE: usize = 32;
pub const CODE_DIM: usize = 256;

const EMA_EPS: f64 = 1e-5;

/// Fixed-size set of code vectors with usage counters and moving-average
/// statistics for codebook learning.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f32>,
    usage: Vec<u64>,
    ema_count: Vec<f64>,
    ema_sum: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let entries = (0..size * dim).map(|_| normal.sample(&mut rng)).collect();
        Self::from_entries(size, dim, entries)
    }

    pub fn from_entries(size: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::InvalidInput("codebook size and dim must be positive".into()));
        }
        if entries.len() != size * dim {
            return Err(Error::shape(size * dim, entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self {
            size,
            dim,
            ema_count: vec![1.0; size],
            ema_sum: entries.iter().map(|&v| v as f64).collect(),
            usage: vec![0; size],
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    pub fn record_usage(&mut self, indices: &[usize]) {
        for &k in indices {
            self.usage[k] += 1;
        }
    }

    /// Moves each used entry toward the mean of the vectors assigned to it.
    pub fn ema_update(&mut self, vectors: &[f32], indices: &[usize], decay: f64) -> Result<()> {
        if vectors.len() != indices.len() * self.dim {
            return Err(Error::shape(indices.len() * self.dim, vectors.len()));
        }
        let mut counts = vec![0.0f64; self.size];
        let mut sums = vec![0.0f64; self.size * self.dim];
        for (v, &k) in vectors.chunks_exact(self.dim).zip(indices) {
            counts[k] += 1.0;
            for (s, &x) in sums[k * self.dim..(k + 1) * self.dim].iter_mut().zip(v) {
                *s += x as f64;
            }
        }
        for k in 0..self.size {
            self.ema_count[k] = decay * self.ema_count[k] + (1.0 - decay) * counts[k];
        }
        for (e, s) in self.ema_sum.iter_mut().zip(&sums) {
            *e = decay * *e + (1.0 - decay) * s;
        }
        let n: f64 = self.ema_count.iter().sum();
        for k in 0..self.size {
            let smoothed = (self.ema_count[k] + EMA_EPS) / (n + self.size as f64 * EMA_EPS) * n;
            for j in 0..self.dim {
                self.entries[k * self.dim + j] = (self.ema_sum[k * self.dim + j] / smoothed) as f32;
            }
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.entries, (self.size, self.dim), &DEVICE)?)
    }

    /// Replaces the entries, e.g. from a checkpoint.
    pub fn set_entries(&mut self, entries: Vec<f32>) -> Result<()> {
        *self = Self::from_entries(self.size, self.dim, entries)?;
        Ok(())
    }
}

/// Maps each `dim`-long vector in `vectors` to its nearest entry (squared
/// Euclidean distance, lowest index on ties). Returns the quantized vectors
/// and the indices.
pub fn quantize(vectors: &[f32], dim: usize, codebook: &Codebook) -> Result<(Vec<f32>, Vec<usize>)> {
    if dim != codebook.dim {
        return Err(Error::shape(format!("vector dim {}", codebook.dim), dim));
    }
    if !vectors.len().is_multiple_of(dim) {
        return Err(Error::shape(format!("multiple of {dim}"), vectors.len()));
    }
    let mut out = Vec::with_capacity(vectors.len());
    let mut indices = Vec::with_capacity(vectors.len() / dim);
    for v in vectors.chunks_exact(dim) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..codebook.size {
            let d: f64 = v
                .iter()
                .zip(codebook.entry(k))
                .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        indices.push(best);
        out.extend_from_slice(codebook.entry(best));
    }
    Ok((out, indices))
}

/// Straight-through quantization of `(N, dim)` rows.
///
/// Returns the quantized rows whose gradient flows to `z` unchanged, the
/// indices, and the commitment loss `mean((z − sg[q])²)`.
pub fn quantize_tensor(z: &Tensor, codebook: &Codebook) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let (n, dim) = z.dims2()?;
    let flat = z.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let (q, indices) = quantize(&flat, dim, codebook)?;
    let q = Tensor::from_vec(q, (n, dim), z.device())?.to_dtype(z.dtype())?;
    let st = (z + (&q - z)?.detach())?;
    let commit = (z - &q)?.sqr()?.mean_all()?;
    Ok((st, indices, commit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_force(v: &[f32], cb: &Codebook) -> usize {
        let dists: Vec<f64> = (0..cb.size())
            .map(|k| {
                let mut s = 0.0;
                for j in 0..cb.dim() {
                    let d = v[j] as f64 - cb.entry(k)[j] as f64;
                    s += d * d;
                }
                s
            })
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&d| d == min).unwrap()
    }

    #[test]
    fn exact_hit_and_ties() {
        let cb = Codebook::new(CODEBOOK_SIZE, CODE_DIM, 0).unwrap();
        let (q, idx) = quantize(cb.entry(7), CODE_DIM, &cb).unwrap();
        assert_eq!(idx, vec![7]);
        assert_eq!(q, cb.entry(7));
        // Midpoint between entries 0 and 1 of a 1-D book.
        let tie = Codebook::from_entries(3, 1, vec![1.0, -1.0, 5.0]).unwrap();
        assert_eq!(quantize(&[0.0], 1, &tie).unwrap().1, vec![0]);
        let tie = Codebook::from_entries(3, 1, vec![5.0, -1.0, 1.0]).unwrap();
        assert_eq!(quantize(&[0.0], 1, &tie).unwrap().1, vec![1]);
    }

    #[test]
    fn nearest_neighbour_matches_brute_force() {
        let cb = Codebook::new(CODEBOOK_SIZE, CODE_DIM, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f32> = (0..100 * CODE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (q, idx) = quantize(&v, CODE_DIM, &cb).unwrap();
        for (i, row) in v.chunks_exact(CODE_DIM).enumerate() {
            assert_eq!(idx[i], brute_force(row, &cb));
        }
        let (q2, idx2) = quantize(&q, CODE_DIM, &cb).unwrap();
        assert_eq!((q2, idx2), (q, idx));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cb = Codebook::new(4, 8, 0).unwrap();
        assert!(quantize(&[0.0; 16], 4, &cb).is_err());
        assert!(quantize(&[0.0; 12], 8, &cb).is_err());
    }

    #[test]
    fn straight_through_gradient_is_identity() {
        let cb = Codebook::new(4, 3, 0).unwrap();
        let z = candle_core::Var::from_tensor(&Tensor::from_vec(vec![0.1f32, 0.2, 0.3, -1.0, 0.5, 2.0], (2, 3), &DEVICE).unwrap()).unwrap();
        let (st, idx, _) = quantize_tensor(z.as_tensor(), &cb).unwrap();
        let expect: Vec<f32> = idx.iter().flat_map(|&k| cb.entry(k).to_vec()).collect();
        let got = st.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6);
        }
        let grads = st.sum_all().unwrap().backward().unwrap();
        let g = grads.get(z.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(g, vec![1.0; 6]);
    }

    #[test]
    fn ema_moves_entries_toward_assignments() {
        let mut cb = Codebook::from_entries(2, 2, vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        let v = [1.0f32, 1.0, 1.0, 1.0];
        for _ in 0..500 {
            let (_, idx) = quantize(&v, 2, &cb).unwrap();
            cb.ema_update(&v, &idx, 0.99).unwrap();
        }
        assert!((cb.entry(0)[0] - 1.0).abs() < 0.02, "{:?}", cb.entry(0));
        // The unused entry stays where it was.
        assert!((cb.entry(1)[0] - 10.0).abs() < 0.05);
    }

    #[test]
    fn usage_counts_every_call() {
        let mut cb = Codebook::new(8, 4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f32> = (0..40 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, idx) = quantize(&v, 4, &cb).unwrap();
        cb.record_usage(&idx);
        assert_eq!(cb.usage().iter().sum::<u64>(), 40);
        cb.reset_usage();
        assert_eq!(cb.usage().iter().sum::<u64>(), 0);
    }
}
