//! Python bindings for `vtdiff`.
//!
//! Frames cross the boundary as nested lists of rows, feature sets as lists of
//! equal-length vectors. Heavy work (training, experiments) runs with the
//! interpreter lock released.

use std::path::PathBuf;

use candle_core::Tensor;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vtdiff::align::AlignmentSpec;
use vtdiff::baselines::{Codebook, ContrastiveConfig, SemanticPair};
use vtdiff::harness::dataset::load_manifest;
use vtdiff::harness::{ModelKind, ToyWorldSpec};
use vtdiff::metrics::{FeatureSet, SsimParams};
use vtdiff::nn::DEVICE;
use vtdiff::schedulers::{NoiseSchedule, SamplerKind, ScheduleConfig};
use vtdiff::{Error, Frame};

fn to_py(e: Error) -> PyErr {
    let msg = format!("[{}] {e}", e.category());
    match e.category() {
        "input" | "config" | "protocol" => PyValueError::new_err(msg),
        "io" | "dataset" => PyIOError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn tensor_err(e: candle_core::Error) -> PyErr {
    to_py(Error::from(e))
}

fn frame_from_rows(rows: Vec<Vec<f32>>) -> PyResult<Frame> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("frame rows must have equal length"));
    }
    Frame::new(height, width, rows.concat()).map_err(to_py)
}

fn frame_to_rows(frame: &Frame) -> Vec<Vec<f32>> {
    frame.data.chunks(frame.width.max(1)).map(<[f32]>::to_vec).collect()
}

fn feature_set(rows: Vec<Vec<f64>>) -> PyResult<FeatureSet> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("feature vectors must have equal length"));
    }
    FeatureSet::new(n, d, rows.concat(), "python").map_err(to_py)
}

/// Linear noise schedule with its inference timestep subset.
#[pyclass(name = "NoiseSchedule", module = "vtdiff_py", frozen)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (train_steps=1000, beta_start=1e-4, beta_end=0.02, inference_steps=25))]
    fn new(train_steps: usize, beta_start: f64, beta_end: f64, inference_steps: usize) -> PyResult<Self> {
        let inner = ScheduleConfig {
            train_steps,
            beta_start,
            beta_end,
            inference_steps,
        }
        .build()
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn train_steps(&self) -> usize {
        self.inner.train_steps()
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    #[getter]
    fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    #[getter]
    fn inference_timesteps(&self) -> Vec<usize> {
        self.inner.inference_timesteps().to_vec()
    }

    /// Cumulative signal fraction at 1-based step `t`; `t = 0` gives 1.
    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        if t > self.inner.train_steps() {
            return Err(PyValueError::new_err(format!("timestep {t} out of range")));
        }
        Ok(self.inner.alpha_bar(t))
    }

    /// Forward-noises `x0` to step `t` with the given standard-normal draw.
    fn q_sample(&self, x0: Vec<f32>, t: usize, eps: Vec<f32>) -> PyResult<Vec<f32>> {
        if x0.len() != eps.len() {
            return Err(PyValueError::new_err("x0 and eps must have equal length"));
        }
        let n = x0.len();
        let x0 = Tensor::from_vec(x0, n, &DEVICE).map_err(tensor_err)?;
        let eps = Tensor::from_vec(eps, n, &DEVICE).map_err(tensor_err)?;
        let out = vtdiff::schedulers::q_sample(&x0, t, &eps, &self.inner).map_err(to_py)?;
        out.to_vec1().map_err(tensor_err)
    }

    /// Runs the reverse process from `x_start`, calling `eps_fn(x, t)` for the
    /// noise prediction at each step. `sampler` is "pndm", "ddpm" or "ddim".
    #[pyo3(signature = (x_start, eps_fn, sampler="pndm", seed=0))]
    fn sample(&self, py: Python<'_>, x_start: Vec<f32>, eps_fn: Py<PyAny>, sampler: &str, seed: u64) -> PyResult<Vec<f32>> {
        let n = x_start.len();
        let x = Tensor::from_vec(x_start, n, &DEVICE).map_err(tensor_err)?;
        let mut py_error = None;
        let mut call = |x: &Tensor, t: usize| -> vtdiff::Result<Tensor> {
            let values: Vec<f32> = x.to_vec1()?;
            let out = eps_fn
                .call1(py, (values, t))
                .and_then(|o| o.extract::<Vec<f32>>(py));
            match out {
                Ok(v) if v.len() == n => Ok(Tensor::from_vec(v, n, &DEVICE)?),
                Ok(v) => Err(Error::shape(n, v.len())),
                Err(e) => {
                    py_error = Some(e);
                    Err(Error::InvalidInput("noise predictor raised".into()))
                }
            }
        };
        let result = match sampler {
            "pndm" | "ddpm" => {
                let kind = if sampler == "pndm" { SamplerKind::Pndm } else { SamplerKind::Ddpm };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                vtdiff::schedulers::sample_loop(kind, x, &self.inner, &mut rng, &mut call)
            }
            "ddim" => vtdiff::schedulers::ddim_loop(x, &self.inner, &mut call),
            other => return Err(PyValueError::new_err(format!("unknown sampler {other:?}"))),
        };
        match result {
            Ok(t) => t.to_vec1().map_err(tensor_err),
            Err(e) => Err(py_error.take().unwrap_or_else(|| to_py(e))),
        }
    }
}

/// Audio sample index at which each video frame starts, plus the end index.
#[pyfunction]
#[pyo3(signature = (frame_count, fps=26.0, sample_rate=16000.0))]
fn frame_boundaries(frame_count: usize, fps: f64, sample_rate: f64) -> PyResult<Vec<usize>> {
    let spec = AlignmentSpec {
        fps,
        sample_rate,
        ..AlignmentSpec::default()
    };
    spec.validate().map_err(to_py)?;
    Ok(vtdiff::align::frame_boundaries(frame_count, &spec))
}

#[pyfunction]
#[pyo3(signature = (x, y, max_value=1.0))]
fn ssim(x: Vec<Vec<f32>>, y: Vec<Vec<f32>>, max_value: f64) -> PyResult<f64> {
    let params = SsimParams {
        max_value,
        ..SsimParams::default()
    };
    vtdiff::metrics::ssim(&frame_from_rows(x)?, &frame_from_rows(y)?, &params).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (x, y, max_value=1.0))]
fn psnr(x: Vec<Vec<f32>>, y: Vec<Vec<f32>>, max_value: f64) -> PyResult<f64> {
    vtdiff::metrics::psnr(&frame_from_rows(x)?, &frame_from_rows(y)?, max_value).map_err(to_py)
}

/// Kernel distance between two feature sets.
#[pyfunction]
fn kid(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    vtdiff::metrics::kid(&feature_set(a)?, &feature_set(b)?).map_err(to_py)
}

/// Fréchet distance between Gaussian fits of two feature sets.
#[pyfunction]
fn fvd(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    vtdiff::metrics::fvd(&feature_set(a)?, &feature_set(b)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (image, speech, positive, margin=1.0))]
fn contrastive_loss(image: Vec<Vec<f32>>, speech: Vec<Vec<f32>>, positive: Vec<bool>, margin: f64) -> PyResult<f64> {
    if image.len() != speech.len() || image.len() != positive.len() {
        return Err(PyValueError::new_err("image, speech and positive must have equal length"));
    }
    let pairs: Vec<SemanticPair> = image
        .into_iter()
        .zip(speech)
        .zip(positive)
        .map(|((image_embedding, speech_embedding), positive)| SemanticPair {
            image_embedding,
            speech_embedding,
            positive,
        })
        .collect();
    let config = ContrastiveConfig {
        margin,
        ..ContrastiveConfig::default()
    };
    vtdiff::baselines::contrastive_loss(&pairs, &config).map_err(to_py)
}

/// Snaps each vector to its nearest code. Returns the quantized vectors and
/// the chosen code indices.
#[pyfunction]
fn quantize(vectors: Vec<Vec<f32>>, codebook: Vec<Vec<f32>>) -> PyResult<(Vec<Vec<f32>>, Vec<usize>)> {
    let dim = codebook.first().map_or(0, Vec::len);
    if codebook.iter().chain(&vectors).any(|v| v.len() != dim) {
        return Err(PyValueError::new_err("vectors and codes must share one dimension"));
    }
    let book = Codebook::from_entries(codebook.len(), dim, codebook.concat()).map_err(to_py)?;
    let (flat, idx) = vtdiff::baselines::quantize(&vectors.concat(), dim, &book).map_err(to_py)?;
    Ok((flat.chunks(dim.max(1)).map(<[f32]>::to_vec).collect(), idx))
}

/// Validated run configuration, round-trippable through TOML.
#[pyclass(name = "RunConfig", module = "vtdiff_py", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: vtdiff::harness::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: vtdiff::harness::RunConfig::default(),
        }
    }

    /// Small preset sized for the synthetic dataset on a CPU.
    #[staticmethod]
    fn toy() -> Self {
        Self {
            inner: vtdiff::harness::RunConfig::toy(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = vtdiff::harness::RunConfig::from_toml(text).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Seed of the denoiser training loop.
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    #[getter]
    fn models(&self) -> Vec<String> {
        self.inner
            .experiment
            .models
            .iter()
            .map(|m| ModelKind::name(*m).to_string())
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(model={}, seed={})", self.inner.model.name(), self.inner.train.seed)
    }
}

/// One synthetic clip: `(frames, waveform, frame_controls)` with frames as
/// nested row lists.
#[pyfunction]
#[pyo3(signature = (index, config=None))]
fn toy_sample(index: usize, config: Option<PyRunConfig>) -> PyResult<(Vec<Vec<Vec<f32>>>, Vec<f32>, Vec<f64>)> {
    let spec: ToyWorldSpec = config.map(|c| c.inner.toy).unwrap_or_default();
    let s = vtdiff::harness::generate_sample(&spec, index).map_err(to_py)?;
    Ok((s.frames.iter().map(frame_to_rows).collect(), s.waveform, s.frame_controls))
}

/// Writes a synthetic dataset under `out` and returns the sample ids.
#[pyfunction]
#[pyo3(signature = (out, n_clips, config=None))]
fn generate_toy_dataset(py: Python<'_>, out: PathBuf, n_clips: usize, config: Option<PyRunConfig>) -> PyResult<Vec<String>> {
    let spec: ToyWorldSpec = config.map(|c| c.inner.toy).unwrap_or_default();
    let manifest = py
        .detach(|| vtdiff::harness::dataset::generate_toy_dataset(&spec, n_clips, &out))
        .map_err(to_py)?;
    Ok(manifest.samples.into_iter().map(|s| s.id).collect())
}

/// Trains and scores every configured model on a dataset directory. Returns
/// the metric report as TSV text.
#[pyfunction]
fn run_experiment(py: Python<'_>, data: PathBuf, config: PyRunConfig) -> PyResult<String> {
    let report = py
        .detach(|| -> vtdiff::Result<_> {
            let manifest = load_manifest(&data)?;
            let outcome = vtdiff::harness::run_experiment(&data, &manifest, &config.inner, None)?;
            Ok(outcome.report)
        })
        .map_err(to_py)?;
    Ok(vtdiff::metrics::write_report(&report))
}

#[pymodule]
fn vtdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PSNR_CAP_DB", vtdiff::metrics::PSNR_CAP_DB)?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(frame_boundaries, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(kid, m)?)?;
    m.add_function(wrap_pyfunction!(fvd, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(toy_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
