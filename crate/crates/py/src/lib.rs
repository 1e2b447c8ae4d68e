//! Python bindings. Arrays cross the boundary as flat `list[float]` plus an
//! explicit shape; `numpy.asarray(x).reshape(shape)` recovers them.

use std::path::PathBuf;

use dfdepth::config::ExperimentConfig;
use dfdepth::distiller::Method;
use dfdepth::evalkit;
use dfdepth::nets::{DepthNet, DepthNetworkSpec, Role};
use dfdepth::simworld::{self, DomainConfig, Sample};
use dfdepth::{losses, mixer, Error, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::InvalidInput(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Format { .. } | Error::Missing(_) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn tensor(data: Vec<f32>, shape: [usize; 4]) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(shape, data).map_err(py_err)
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "DomainConfig", from_py_object)]
#[derive(Clone)]
struct PyDomainConfig {
    inner: DomainConfig,
}

#[pymethods]
impl PyDomainConfig {
    #[staticmethod]
    fn target() -> Self {
        Self { inner: DomainConfig::target_default() }
    }

    #[staticmethod]
    fn ood() -> Self {
        Self { inner: DomainConfig::ood_default() }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: DomainConfig = serde_json::from_str(text).map_err(json_err)?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.inner.image_size
    }

    #[getter]
    fn depth_range(&self) -> (f64, f64) {
        self.inner.depth_range
    }

    fn __repr__(&self) -> String {
        format!("DomainConfig({})", self.to_json())
    }
}

#[pyclass(name = "Sample")]
struct PySample {
    inner: Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    /// `H x W x 3` in `[0, 1]`, row-major.
    #[getter]
    fn rgb(&self) -> Vec<f32> {
        self.inner.rgb.clone()
    }

    /// `H x W` meters.
    #[getter]
    fn depth(&self) -> Vec<f32> {
        self.inner.depth.clone()
    }

    #[getter]
    fn semantics(&self) -> Vec<u8> {
        self.inner.semantics.clone()
    }

    fn classes_present(&self) -> Vec<u8> {
        self.inner.classes_present()
    }
}

#[pyfunction]
fn generate_sample(config: &PyDomainConfig, seed: u64) -> PyResult<PySample> {
    Ok(PySample { inner: simworld::generate_sample(&config.inner, seed).map_err(py_err)? })
}

/// Writes `count` samples to `out_dir`; returns the sample count.
#[pyfunction]
fn generate_dataset(config: &PyDomainConfig, count: usize, out_dir: PathBuf) -> PyResult<usize> {
    Ok(simworld::generate_dataset(&config.inner, count, &out_dir).map_err(py_err)?.count)
}

/// Object-wise mixing of two samples; returns a dict with `rgb`, `mask`
/// (true where the pixel comes from `a`) and `selected_classes`.
#[pyfunction]
fn classmix<'py>(py: Python<'py>, a: &PySample, b: &PySample, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = mixer::classmix(&a.inner, &b.inner, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("rgb", r.mixed_rgb)?;
    d.set_item("mask", r.mask)?;
    d.set_item("selected_classes", r.selected_classes)?;
    Ok(d)
}

fn metrics_dict<'py>(py: Python<'py>, m: &evalkit::MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("rel", m.rel)?;
    d.set_item("delta1", m.delta1)?;
    d.set_item("delta2", m.delta2)?;
    d.set_item("delta3", m.delta3)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("log10", m.log10)?;
    d.set_item("n_pixels", m.n_pixels)?;
    Ok(d)
}

/// Metrics over pixels with positive ground truth.
#[pyfunction]
fn depth_metrics<'py>(py: Python<'py>, pred: Vec<f64>, gt: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let n = gt.len();
    let p = Tensor::from_vec([1, 1, 1, pred.len()], pred).map_err(py_err)?;
    let g = Tensor::from_vec([1, 1, 1, n], gt).map_err(py_err)?;
    let m = evalkit::depth_metrics(&p, &g, &losses::valid_mask(&g)).map_err(py_err)?;
    metrics_dict(py, &m)
}

/// Composite depth loss of `N x H x W` maps; returns `{total, depth, grad, normal}`.
#[pyfunction]
fn depth_loss<'py>(py: Python<'py>, pred: Vec<f64>, target: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Bound<'py, PyDict>> {
    let s = [shape.0, 1, shape.1, shape.2];
    let p = Tensor::from_vec(s, pred).map_err(py_err)?;
    let t = Tensor::from_vec(s, target).map_err(py_err)?;
    let b = losses::depth_loss(&p, &t, &losses::valid_mask(&t)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("total", b.total)?;
    for (k, v) in b.components {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Normalized histogram of positive depths over `range`.
#[pyfunction]
#[pyo3(signature = (depths, bins = evalkit::JSD_BINS, range = (0.0, 10.0)))]
fn depth_histogram(depths: Vec<f64>, bins: usize, range: (f64, f64)) -> PyResult<Vec<f64>> {
    let t = Tensor::from_vec([1, 1, 1, depths.len()], depths).map_err(py_err)?;
    Ok(evalkit::depth_histogram(&[&t], bins, range).map_err(py_err)?.mass())
}

/// Jensen–Shannon divergence in bits.
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    evalkit::jsd(&p, &q).map_err(py_err)
}

#[pyclass(name = "DepthNet")]
struct PyDepthNet {
    inner: DepthNet<f32>,
}

impl PyDepthNet {
    fn images(&self, images: Vec<f32>, n: usize) -> PyResult<Tensor<f32>> {
        let (h, w) = self.inner.spec().input_size;
        tensor(images, [n, 3, h, w])
    }
}

#[pymethods]
impl PyDepthNet {
    #[staticmethod]
    #[pyo3(signature = (height = 48, width = 64, max_depth = 10.0, seed = 0))]
    fn teacher(height: usize, width: usize, max_depth: f64, seed: u64) -> PyResult<Self> {
        let inner = DepthNet::build(DepthNetworkSpec::teacher(max_depth, (height, width)), Role::Teacher, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (height = 48, width = 64, max_depth = 10.0, seed = 0))]
    fn student(height: usize, width: usize, max_depth: f64, seed: u64) -> PyResult<Self> {
        let inner = DepthNet::build(DepthNetworkSpec::student(max_depth, (height, width)), Role::Student, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: DepthNet::load(&path, None).map_err(py_err)?.0 })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, None).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.spec().input_size
    }

    #[getter]
    fn role(&self) -> &'static str {
        match self.inner.role() {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    /// Eval-mode depth for `n` images given as flat `N x 3 x H x W`.
    fn predict(&self, py: Python<'_>, images: Vec<f32>, n: usize) -> PyResult<Vec<f32>> {
        let x = self.images(images, n)?;
        let out = py.detach(|| evalkit::predict_all(&self.inner, &x, 32)).map_err(py_err)?;
        Ok(out.into_vec())
    }

    /// IFGSM perturbation of flat `N x 3 x H x W` images against the clean
    /// predictions.
    #[pyo3(signature = (images, n, epsilon, steps = evalkit::IFGSM_STEPS))]
    fn attack(&self, py: Python<'_>, images: Vec<f32>, n: usize, epsilon: f64, steps: usize) -> PyResult<Vec<f32>> {
        let x = self.images(images, n)?;
        let out = py.detach(|| evalkit::ifgsm_attack(&self.inner, &x, None, epsilon, steps)).map_err(py_err)?;
        Ok(out.into_vec())
    }

    /// Batch-wise BN statistics per layer as `[(means, vars), ...]`.
    fn batch_stats(&self, images: Vec<f32>, n: usize) -> PyResult<Vec<(Vec<f32>, Vec<f32>)>> {
        let x = self.images(images, n)?;
        let s = dfdepth::nets::capture_batchwise_stats(&self.inner, &x).map_err(py_err)?;
        Ok(s.layers.into_iter().map(|l| (l.mean, l.var)).collect())
    }
}

#[pyclass(name = "Experiment")]
struct PyExperiment {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(t) => ExperimentConfig::from_json(t).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::load(&path).map_err(py_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn output_root(&self) -> PathBuf {
        self.inner.output_root.clone()
    }

    #[setter]
    fn set_output_root(&mut self, root: PathBuf) {
        self.inner.output_root = root;
    }

    fn generate(&self, py: Python<'_>) -> PyResult<()> {
        py.detach(|| dfdepth::cli::cmd_gen(&self.inner)).map_err(py_err)
    }

    /// Runs one method; returns the run record as JSON.
    #[pyo3(signature = (method, seed = 0))]
    fn run(&self, py: Python<'_>, method: &str, seed: u64) -> PyResult<String> {
        let m: Method = method.parse().map_err(py_err)?;
        let rec = py.detach(|| dfdepth::cli::cmd_run(&self.inner, m, seed)).map_err(py_err)?;
        serde_json::to_string(&rec).map_err(json_err)
    }
}

/// Builds `metrics.json` / `metrics.txt` / plots from run directories;
/// returns the report as JSON.
#[pyfunction]
fn make_report(runs: Vec<PathBuf>, out_dir: PathBuf) -> PyResult<String> {
    let r = dfdepth::cli::cmd_report(&runs, &out_dir).map_err(py_err)?;
    serde_json::to_string(&r).map_err(json_err)
}

/// Names accepted by `Experiment.run`.
#[pyfunction]
fn methods() -> Vec<&'static str> {
    Method::ALL.iter().map(|m| m.name()).collect()
}

#[pymodule]
fn dfdepth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDomainConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyDepthNet>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(classmix, m)?)?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(depth_loss, m)?)?;
    m.add_function(wrap_pyfunction!(depth_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(make_report, m)?)?;
    m.add_function(wrap_pyfunction!(methods, m)?)?;
    m.add("JSD_BINS", evalkit::JSD_BINS)?;
    Ok(())
}
