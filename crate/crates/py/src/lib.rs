//! Python bindings. Images cross the boundary as raw interleaved `bytes` plus
//! dimensions, so the module has no numpy dependency.

use std::path::{Path, PathBuf};

use afa_core::afa_net::{images_to_tensor, AfaModel, Checkpoint, ModelConfig};
use afa_core::dataset_io::{generate_synthetic, load_manifest, SyntheticSpec};
use afa_core::depth_prep::{normalize_depth, DepthAlgorithm, FaceBox, RawDepthMap};
use afa_core::image::Image8;
use afa_core::objective_metrics::{evaluate as evaluate_scores, live_scores, Label};
use afa_core::quality_degrade::{self, DegradeSpec};
use afa_core::train_harness::{score_samples, TrainConfig, Trainer};
use afa_core::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// 8-bit interleaved image.
#[pyclass(name = "Image", module = "afa_py", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: Image8,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: &[u8]) -> PyResult<Self> {
        let inner = Image8::from_raw(width, height, channels, data.to_vec()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Image8::load_png(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn tobytes(&self) -> Vec<u8> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Image({}x{}x{})",
            self.inner.width(),
            self.inner.height(),
            self.inner.channels()
        )
    }
}

/// Normalizes a raw depth map (row-major `values`) to an 8-bit image using the
/// statistics of the face box `(x, y, w, h)`.
#[pyfunction]
#[pyo3(signature = (values, height, width, bbox, algo = "alg2", max_raw = 65535))]
fn normalize_depth_map(
    values: Vec<u32>,
    height: usize,
    width: usize,
    bbox: (i64, i64, i64, i64),
    algo: &str,
    max_raw: u32,
) -> PyResult<PyImage> {
    let algo: DepthAlgorithm = algo.parse().map_err(py_err)?;
    let raw = RawDepthMap::with_max_raw(height, width, values, max_raw).map_err(py_err)?;
    let face = FaceBox::new(bbox.0, bbox.1, bbox.2, bbox.3);
    let out = normalize_depth(algo, &raw, face).map_err(py_err)?;
    Ok(PyImage { inner: out.to_image() })
}

#[pyfunction]
#[pyo3(signature = (image, resolution, blur = false, kernel = 3, sigma = 1.5))]
fn degrade(image: &PyImage, resolution: usize, blur: bool, kernel: usize, sigma: f64) -> PyResult<PyImage> {
    let spec = DegradeSpec {
        target_resolution: resolution,
        blur_enabled: blur,
        kernel_size: kernel,
        sigma,
    };
    let inner = quality_degrade::degrade(&image.inner, &spec).map_err(py_err)?;
    Ok(PyImage { inner })
}

/// Returns `(psnr_db, ssim)`.
#[pyfunction]
fn quality(reference: &PyImage, test: &PyImage) -> PyResult<(f64, f64)> {
    let q = quality_degrade::quality(&reference.inner, &test.inner).map_err(py_err)?;
    Ok((q.psnr_db, q.ssim))
}

/// Scores are live probabilities; labels are 1 for live and 0 for spoof.
/// APCER, NPCER and ACER are percentages.
/// Returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5))]
fn evaluate(scores: Vec<f64>, labels: Vec<usize>, threshold: f64) -> PyResult<String> {
    let labels = labels
        .into_iter()
        .map(Label::from_index)
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let report = evaluate_scores(&scores, &labels, threshold).map_err(py_err)?;
    Ok(report.to_json())
}

/// Writes a synthetic dataset and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_live, n_spoof, resolution = 8, seed = 0))]
fn gen_synth(out_dir: PathBuf, n_live: usize, n_spoof: usize, resolution: usize, seed: u64) -> PyResult<PathBuf> {
    let spec = SyntheticSpec::new(n_live, n_spoof, resolution, seed);
    generate_synthetic(&spec, &out_dir).map_err(py_err)
}

fn train_config(toml: Option<&str>) -> PyResult<TrainConfig> {
    match toml {
        Some(text) => TrainConfig::from_toml(text).map_err(py_err),
        None => Ok(TrainConfig::default()),
    }
}

/// Trains from a manifest and returns the per-step total losses. Checkpoints and
/// `train_log.jsonl` go to `out_dir`.
#[pyfunction]
#[pyo3(signature = (manifest, out_dir, config = None, max_steps = None))]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: PathBuf,
    config: Option<&str>,
    max_steps: Option<u64>,
) -> PyResult<Vec<f64>> {
    let cfg = train_config(config)?;
    py.detach(|| {
        let samples = load_manifest(&manifest)?.load_samples()?;
        let mut trainer = Trainer::new(cfg, &samples)?.with_run_dir(&out_dir)?;
        let log = trainer.run(max_steps)?;
        Ok::<_, Error>(log.iter().map(|r| r.loss.total).collect())
    })
    .map_err(py_err)
}

/// Face anti-spoofing network with f32 weights.
#[pyclass(name = "Model", module = "afa_py")]
pub struct PyModel {
    inner: AfaModel<f32>,
}

#[pymethods]
impl PyModel {
    /// `config` is TOML using the training-config keys; only model keys are read.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let model_cfg: ModelConfig = train_config(config)?.model;
        Ok(Self {
            inner: AfaModel::init(model_cfg, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self {
            inner: ck.to_model().map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, Default::default())
            .save(&path)
            .map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn in_resolution(&self) -> usize {
        self.inner.config.in_resolution
    }

    /// Live probability for one sample given its RGB, depth and IR inputs.
    fn predict(&self, rgb: &PyImage, depth: &PyImage, ir: &PyImage) -> PyResult<f64> {
        let t = [&rgb.inner, &depth.inner, &ir.inner].map(|img| images_to_tensor::<f32>(&[img]));
        let [r, d, i] = t;
        let (r, d, i) = (r.map_err(py_err)?, d.map_err(py_err)?, i.map_err(py_err)?);
        let pred = self.inner.predict([&r, &d, &i]).map_err(py_err)?;
        let logits: Vec<f64> = pred.logits.data().iter().map(|&v| v as f64).collect();
        Ok(live_scores(&logits)[0])
    }

    /// Live probabilities for every sample in a manifest, in manifest order.
    #[pyo3(signature = (manifest, batch_size = 32))]
    fn score_manifest(&self, py: Python<'_>, manifest: PathBuf, batch_size: usize) -> PyResult<Vec<f64>> {
        let path: &Path = &manifest;
        py.detach(|| {
            let samples = load_manifest(path)?.load_samples()?;
            score_samples(&self.inner, &samples, batch_size)
        })
        .map_err(py_err)
    }
}

#[pymodule]
pub fn afa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(normalize_depth_map, m)?)?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
