use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n × d` feature matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>, extractor_id: impl Into<String>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::shape(format!("{n}x{d}"), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(Self {
            n,
            d,
            data,
            extractor_id: extractor_id.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Rows `indices` as a new set.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            n: indices.len(),
            d: self.d,
            data,
            extractor_id: self.extractor_id.clone(),
        }
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.data)
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet, min_n: usize) -> Result<()> {
    if a.d != b.d {
        return Err(Error::shape(format!("feature dim {}", a.d), b.d));
    }
    if a.n < min_n || b.n < min_n {
        return Err(Error::InvalidInput(format!(
            "need at least {min_n} samples per set, got {} and {}",
            a.n, b.n
        )));
    }
    if a.extractor_id != b.extractor_id {
        log::warn!(
            "comparing features from different extractors: {} vs {}",
            a.extractor_id,
            b.extractor_id
        );
    }
    Ok(())
}

fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / u.len() as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel `(u·v/d + 1)³`.
pub fn kid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    let (m, n) = (a.n as f64, b.n as f64);
    let mut kxx = 0.0;
    for i in 0..a.n {
        for j in 0..a.n {
            if i != j {
                kxx += poly_kernel(a.row(i), a.row(j));
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..b.n {
        for j in 0..b.n {
            if i != j {
                kyy += poly_kernel(b.row(i), b.row(j));
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..a.n {
        for j in 0..b.n {
            kxy += poly_kernel(a.row(i), b.row(j));
        }
    }
    Ok(kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n))
}

pub const FVD_REGULARIZER: f64 = 1e-6;

/// Mean and unbiased covariance plus the diagonal regularizer.
fn gaussian_fit(f: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let x = f.matrix();
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(f.n, f.d, |i, j| x[(i, j)] - mean[j]);
    let denom = (f.n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom + DMatrix::identity(f.d, f.d) * FVD_REGULARIZER;
    (mean, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// `Tr((Σa Σb)^{1/2})` is computed as the trace of the square root of the
/// symmetric `Σa^{1/2} Σb Σa^{1/2}`.
pub fn fvd(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    if a.n <= a.d || b.n <= b.d {
        log::warn!(
            "FVD with {} / {} samples in {} dims; covariance is rank deficient",
            a.n,
            b.n,
            a.d
        );
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    let sa = psd_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let mean_term = (&ma - &mb).norm_squared();
    let value = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("FVD".into()));
    }
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn set(rows: &[&[f64]]) -> FeatureSet {
        let d = rows[0].len();
        FeatureSet::new(rows.len(), d, rows.concat(), "t").unwrap()
    }

    fn gaussian(n: usize, mean: &[f64], scale: &[f64], seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Normal::new(0.0, 1.0).unwrap();
        let d = mean.len();
        let data = (0..n * d).map(|i| mean[i % d] + scale[i % d] * z.sample(&mut rng)).collect();
        FeatureSet::new(n, d, data, "t").unwrap()
    }

    #[test]
    fn kid_matches_explicit_double_sum() {
        let a = set(&[&[0.1, 0.7], &[-0.3, 0.2], &[0.5, -0.4]]);
        let b = set(&[&[0.9, 0.1], &[0.0, -0.8], &[0.3, 0.3]]);
        let k = |u: &[f64], v: &[f64]| ((u[0] * v[0] + u[1] * v[1]) / 2.0 + 1.0).powi(3);
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    xx += k(a.row(i), a.row(j));
                    yy += k(b.row(i), b.row(j));
                }
                xy += k(a.row(i), b.row(j));
            }
        }
        let oracle = xx / 6.0 + yy / 6.0 - 2.0 * xy / 9.0;
        assert!((kid(&a, &b).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn kid_of_a_set_with_itself_is_not_positive() {
        let a = gaussian(50, &[0.0; 4], &[1.0; 4], 1);
        assert!(kid(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn kid_grows_with_separation() {
        let base = gaussian(200, &[0.0; 3], &[1.0; 3], 2);
        let vals: Vec<f64> = [0.5, 1.5, 3.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| kid(&base, &gaussian(200, &[s; 3], &[1.0; 3], 10 + i as u64)).unwrap())
            .collect();
        assert!(vals[0] > 0.0 && vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
    }

    #[test]
    fn kid_rejects_bad_input() {
        let a = set(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(kid(&a, &set(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 0.0]])).is_err());
        assert!(kid(&a, &set(&[&[0.0, 1.0]])).is_err());
    }

    #[test]
    fn fvd_identical_sets_is_zero() {
        let a = gaussian(300, &[0.3, -1.0, 2.0], &[1.0, 0.5, 2.0], 3);
        assert!(fvd(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn fvd_mean_shift_matches_closed_form() {
        let mu = [1.0, -0.5, 0.5, 2.0];
        let norm2: f64 = mu.iter().map(|v| v * v).sum();
        let a = gaussian(1000, &[0.0; 4], &[1.0; 4], 4);
        let b = gaussian(1000, &mu, &[1.0; 4], 5);
        let v = fvd(&a, &b).unwrap();
        assert!((v - norm2).abs() / norm2 < 0.05, "{v} vs {norm2}");
        assert!((v - fvd(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn fvd_diagonal_covariances_match_closed_form() {
        // Exact diagonal covariances: ±σ per axis, one axis at a time.
        let va = [1.0, 4.0, 0.25];
        let vb = [2.0, 1.0, 1.0];
        let build = |v: &[f64; 3]| {
            let mut rows = Vec::new();
            for (k, var) in v.iter().enumerate() {
                for s in [-1.0, 1.0] {
                    let mut r = [0.0; 3];
                    r[k] = s * (var * 5.0 / 2.0).sqrt();
                    rows.push(r);
                }
            }
            let data: Vec<f64> = rows.concat();
            FeatureSet::new(6, 3, data, "t").unwrap()
        };
        let (a, b) = (build(&va), build(&vb));
        let expected: f64 = va
            .iter()
            .zip(&vb)
            .map(|(x, y)| ((x + FVD_REGULARIZER).sqrt() - (y + FVD_REGULARIZER).sqrt()).powi(2))
            .sum();
        assert!((fvd(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn fvd_same_distribution_vanishes_with_n() {
        let a = gaussian(1000, &[0.0; 4], &[1.0; 4], 6);
        let b = gaussian(1000, &[0.0; 4], &[1.0; 4], 7);
        // Within 5% of the feature dimension scale.
        assert!(fvd(&a, &b).unwrap() < 0.05 * 4.0);
    }
}
