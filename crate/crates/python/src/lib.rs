//! Python bindings: configs, the staged pipeline, volumes, trained models
//! and the evaluation metrics.
//!
//! Structured results cross the boundary as JSON-compatible `dict`s.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use uda_core::metrics;
use uda_core::phantom::{generate_anatomy, render_modality, DomainStyle, PhantomSpec};
use uda_core::pipeline::{self, Arm};
use uda_core::segmentation::{self, Segmenter};
use uda_core::translation::{self, Translator};
use uda_core::volume;
use uda_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => PyValueError::new_err(e.to_string()),
        Error::MissingInput(_) => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,)).map(|o| o.unbind())
}

fn arm(name: &str) -> PyResult<Arm> {
    name.parse().map_err(to_py)
}

#[pyclass(name = "PipelineConfig", module = "uda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: pipeline::PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// Named preset: "reference", "smoke" or "full".
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        pipeline::PipelineConfig::preset(name).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        pipeline::PipelineConfig::from_toml(text).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::PipelineConfig::load(&path).map(|inner| PyConfig { inner }).map_err(to_py)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Hash of the resolved config.
    fn hash(&self) -> PyResult<String> {
        Ok(self.inner.clone().resolve().map_err(to_py)?.hash())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("PipelineConfig(seed={}, output_dir={:?})", self.inner.seed, self.inner.output_dir)
    }
}

#[pyclass(name = "Pipeline", module = "uda_py")]
struct PyPipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, resume = false))]
    fn new(config: &PyConfig, resume: bool) -> PyResult<Self> {
        pipeline::Pipeline::new(config.inner.clone(), resume)
            .map(|inner| PyPipeline { inner })
            .map_err(to_py)
    }

    #[getter]
    fn root(&self) -> PathBuf {
        self.inner.root.clone()
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    /// Returns the data manifest hash.
    fn gen_data(&self, py: Python<'_>) -> PyResult<String> {
        py.detach(|| self.inner.gen_data()).map(|m| m.hash()).map_err(to_py)
    }

    /// Returns the translation fidelity summary.
    fn train_translate(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let f = py.detach(|| self.inner.train_translate()).map_err(to_py)?;
        json(py, &f)
    }

    fn translate(&self, py: Python<'_>) -> PyResult<Vec<PyVolume>> {
        let v = py.detach(|| self.inner.translate()).map_err(to_py)?;
        Ok(v.into_iter().map(|inner| PyVolume { inner }).collect())
    }

    fn train_seg(&self, py: Python<'_>, arm_name: &str) -> PyResult<PySegmentation> {
        let a = arm(arm_name)?;
        let m = py.detach(|| self.inner.train_seg(a)).map_err(to_py)?;
        Ok(PySegmentation { inner: m })
    }

    fn pseudo_label(&self, py: Python<'_>, round: usize) -> PyResult<Vec<PyVolume>> {
        let p = py.detach(|| self.inner.pseudo_label(round)).map_err(to_py)?;
        Ok(p.into_iter().map(|p| PyVolume { inner: p.volume }).collect())
    }

    fn finetune(&self, py: Python<'_>, round: usize) -> PyResult<PySegmentation> {
        let m = py.detach(|| self.inner.finetune(round)).map_err(to_py)?;
        Ok(PySegmentation { inner: m })
    }

    /// Returns the arm result (metrics, efficiency rows, provenance).
    fn evaluate(&self, py: Python<'_>, arm_name: &str) -> PyResult<Py<PyAny>> {
        let a = arm(arm_name)?;
        let r = py.detach(|| self.inner.evaluate(a)).map_err(to_py)?;
        json(py, &r)
    }

    /// Runs the given arms (all configured arms when empty).
    #[pyo3(signature = (arms = Vec::new()))]
    fn ablate(&self, py: Python<'_>, arms: Vec<String>) -> PyResult<Py<PyAny>> {
        let arms = arms.iter().map(|a| arm(a)).collect::<PyResult<Vec<_>>>()?;
        let r = py.detach(|| self.inner.ablate(&arms)).map_err(to_py)?;
        json(py, &r)
    }

    /// Writes tables and figures into `<root>/report`; returns their paths.
    fn report(&self, py: Python<'_>) -> PyResult<Vec<PathBuf>> {
        py.detach(|| uda_core::report::report_run(&self.inner.root)).map_err(to_py)
    }

    /// Preprocessed volumes of "source", "target", "oracle_a" or "oracle_b".
    fn volumes(&self, split: &str) -> PyResult<Vec<PyVolume>> {
        let s = match split {
            "source" => pipeline::Split::Source,
            "target" => pipeline::Split::Target,
            "oracle_a" => pipeline::Split::OracleA,
            "oracle_b" => pipeline::Split::OracleB,
            other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
        };
        let v = self.inner.volumes(s).map_err(to_py)?;
        Ok(v.into_iter().map(|inner| PyVolume { inner }).collect())
    }
}

#[pyclass(name = "LabeledVolume", module = "uda_py", skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volume::LabeledVolume,
}

#[pymethods]
impl PyVolume {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        volume::LabeledVolume::load(&path).map(|inner| PyVolume { inner }).map_err(to_py)
    }

    /// Returns the SHA-256 of the written file.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    /// `(D, H, W)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let [d, h, w] = self.inner.shape;
        (d, h, w)
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.inner.spacing;
        (a, b, c)
    }

    #[getter]
    fn domain(&self) -> String {
        format!("{:?}", self.inner.domain)
    }

    /// Row-major intensities.
    #[getter]
    fn intensities(&self) -> Vec<f32> {
        self.inner.intensities.clone()
    }

    /// Row-major labels as bytes.
    #[getter]
    fn labels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.labels)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("LabeledVolume(id={:?}, shape={:?}, domain={:?})", self.inner.id(), self.inner.shape, self.inner.domain)
    }
}

/// One phantom anatomy rendered in domain "A" or "B".
#[pyfunction]
#[pyo3(signature = (seed, domain = "A", shape = (4, 64, 64)))]
fn phantom(seed: u64, domain: &str, shape: (usize, usize, usize)) -> PyResult<PyVolume> {
    let spec = PhantomSpec {
        grid_shape: [shape.0, shape.1, shape.2],
        ..Default::default()
    };
    let style = match domain {
        "A" => DomainStyle::source(spec.num_classes),
        "B" => DomainStyle::target(spec.num_classes),
        other => return Err(PyValueError::new_err(format!("domain must be 'A' or 'B', got '{other}'"))),
    };
    let anatomy = generate_anatomy(&spec, seed).map_err(to_py)?;
    let inner = render_modality(&anatomy, &style, seed.wrapping_add(1)).map_err(to_py)?;
    Ok(PyVolume { inner })
}

#[pyclass(name = "SegmentationModel", module = "uda_py")]
struct PySegmentation {
    inner: segmentation::SegmentationModel,
}

#[pymethods]
impl PySegmentation {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        segmentation::SegmentationModel::load(&path).map(|inner| PySegmentation { inner }).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.checkpoint_id()
    }

    /// Label map of `volume` as bytes.
    fn predict<'py>(&self, py: Python<'py>, volume: &PyVolume) -> PyResult<Bound<'py, PyBytes>> {
        let p = py.detach(|| self.inner.predict(&volume.inner)).map_err(to_py)?;
        Ok(PyBytes::new(py, &p.labels))
    }

    /// Class probabilities, class-major (`K × D·H·W`).
    fn probabilities(&self, py: Python<'_>, volume: &PyVolume) -> PyResult<Vec<f32>> {
        py.detach(|| self.inner.predict(&volume.inner)).map(|p| p.probs).map_err(to_py)
    }
}

#[pyclass(name = "TranslationModel", module = "uda_py")]
struct PyTranslation {
    inner: translation::TranslationModel,
}

#[pymethods]
impl PyTranslation {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        translation::TranslationModel::load(&path).map(|inner| PyTranslation { inner }).map_err(to_py)
    }

    /// Source content decoded with a style slice of `style_source`.
    #[pyo3(signature = (source, style_source, seed = 0))]
    fn translate(&self, py: Python<'_>, source: &PyVolume, style_source: &PyVolume, seed: u64) -> PyResult<PyVolume> {
        py.detach(|| translation::translate_volume(&source.inner, &style_source.inner, &self.inner as &dyn Translator, seed))
            .map(|inner| PyVolume { inner })
            .map_err(to_py)
    }
}

/// Dice similarity of `class` between two label maps.
#[pyfunction]
fn dsc(pred: &[u8], gt: &[u8], class: u8) -> PyResult<f64> {
    metrics::dsc(pred, gt, class).map_err(to_py)
}

/// Normalized surface Dice of `class` at `tolerance_mm`.
#[pyfunction]
#[pyo3(signature = (pred, gt, shape, class, tolerance_mm, spacing = (1.0, 1.0, 1.0)))]
fn nsd(
    pred: &[u8],
    gt: &[u8],
    shape: (usize, usize, usize),
    class: u8,
    tolerance_mm: f64,
    spacing: (f64, f64, f64),
) -> PyResult<f64> {
    metrics::nsd(
        pred,
        gt,
        [shape.0, shape.1, shape.2],
        class,
        tolerance_mm,
        [spacing.0, spacing.1, spacing.2],
    )
    .map_err(to_py)
}

/// Trapezoidal area under `(time_s, memory_mb)` samples, in MB·s.
#[pyfunction]
fn trapezoid_area(samples: Vec<(f64, f64)>) -> f64 {
    metrics::trapezoid_area(&samples)
}

#[pymodule]
pub fn uda_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PySegmentation>()?;
    m.add_class::<PyTranslation>()?;
    m.add_function(wrap_pyfunction!(phantom, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(nsd, m)?)?;
    m.add_function(wrap_pyfunction!(trapezoid_area, m)?)?;
    m.add("ARMS", ["no_uda", "drl", "drl_st"])?;
    m.add("PRESETS", pipeline::PRESETS.to_vec())?;
    m.add("IGNORE_LABEL", uda_core::autograd::IGNORE_LABEL)?;
    Ok(())
}
