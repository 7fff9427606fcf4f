//! Python bindings: quaternion algebra, the R2H encoder, parameter
//! accounting, feature files, synthetic data, training, evaluation and the
//! self checks.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qnn_core::autograd::Tape;
use qnn_core::checkpoint;
use qnn_core::config::ModelConfig;
use qnn_core::data::{generate_synthetic, read_features as core_read_features, write_synthetic, SynthSpec};
use qnn_core::layers::{Activation, R2HEncoder};
use qnn_core::qlstm::{AcousticModel, ParamBreakdown};
use qnn_core::params::ParamStore;
use qnn_core::quat;
use qnn_core::scalar::{Precision, Scalar};
use qnn_core::selfcheck::{run as run_selfcheck, Fault};
use qnn_core::tensor::Tensor;
use qnn_core::train::{evaluate as core_evaluate, train as core_train, EvalResult};
use qnn_core::QnnError;

fn to_py(e: QnnError) -> PyErr {
    match e {
        QnnError::Config(_) => PyValueError::new_err(e.to_string()),
        QnnError::Format { .. } | QnnError::Data { .. } | QnnError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Quaternion", module = "qnn", frozen, eq, from_py_object)]
#[derive(Clone, Copy, PartialEq)]
struct PyQuaternion(quat::Quaternion);

#[pymethods]
impl PyQuaternion {
    #[new]
    #[pyo3(signature = (r=0.0, x=0.0, y=0.0, z=0.0))]
    fn new(r: f64, x: f64, y: f64, z: f64) -> Self {
        PyQuaternion(quat::Quaternion::new(r, x, y, z))
    }

    #[getter]
    fn r(&self) -> f64 {
        self.0.r
    }
    #[getter]
    fn x(&self) -> f64 {
        self.0.x
    }
    #[getter]
    fn y(&self) -> f64 {
        self.0.y
    }
    #[getter]
    fn z(&self) -> f64 {
        self.0.z
    }

    fn to_list(&self) -> [f64; 4] {
        self.0.to_array()
    }

    fn conjugate(&self) -> Self {
        PyQuaternion(quat::conjugate(self.0))
    }

    fn norm(&self) -> f64 {
        quat::norm(self.0)
    }

    #[pyo3(signature = (eps=quat::DEFAULT_NORM_EPS))]
    fn normalize(&self, eps: f64) -> Self {
        PyQuaternion(quat::normalize(self.0, eps))
    }

    /// Left-multiplication matrix, row-major.
    fn to_matrix(&self) -> [[f64; 4]; 4] {
        quat::to_matrix(self.0).m
    }

    fn __mul__(&self, other: &Self) -> Self {
        PyQuaternion(quat::hamilton(self.0, other.0))
    }

    fn __add__(&self, other: &Self) -> Self {
        PyQuaternion(self.0 + other.0)
    }

    fn __sub__(&self, other: &Self) -> Self {
        PyQuaternion(self.0 - other.0)
    }

    fn __neg__(&self) -> Self {
        PyQuaternion(-self.0)
    }

    fn __repr__(&self) -> String {
        let q = self.0;
        format!("Quaternion({}, {}, {}, {})", q.r, q.x, q.y, q.z)
    }
}

#[pyfunction]
fn hamilton(a: &PyQuaternion, b: &PyQuaternion) -> PyQuaternion {
    PyQuaternion(quat::hamilton(a.0, b.0))
}

/// Model configuration; keyword arguments use the config-file keys.
#[pyclass(name = "ModelConfig", module = "qnn", from_py_object)]
#[derive(Clone)]
struct PyModelConfig(ModelConfig);

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = ModelConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                c.set(&key, &v.str()?.to_string()).map_err(to_py)?;
            }
        }
        c.validate().map_err(to_py)?;
        Ok(PyModelConfig(c))
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let mut c = ModelConfig::default();
        c.apply_file(&path).map_err(to_py)?;
        c.validate().map_err(to_py)?;
        Ok(PyModelConfig(c))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut c = self.0.clone();
        c.set(key, &value.str()?.to_string()).map_err(to_py)?;
        c.validate().map_err(to_py)?;
        self.0 = c;
        Ok(())
    }

    fn canonical(&self) -> String {
        self.0.canonical()
    }

    fn digest(&self) -> String {
        self.0.digest()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for line in self.0.canonical().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                d.set_item(k, v)?;
            }
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig(digest={})", &self.0.digest()[..12])
    }
}

fn breakdown_dict<'py>(py: Python<'py>, b: &ParamBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("front_weights", b.front_weights)?;
    d.set_item("front_biases", b.front_biases)?;
    d.set_item("recurrent_weights", b.recurrent_weights)?;
    d.set_item("recurrent_biases", b.recurrent_biases)?;
    d.set_item("output_weights", b.output_weights)?;
    d.set_item("output_biases", b.output_biases)?;
    d.set_item("total", b.total())?;
    Ok(d)
}

/// Symbolic parameter counts of a configuration.
#[pyfunction]
fn count_params<'py>(py: Python<'py>, config: &PyModelConfig) -> PyResult<Bound<'py, PyDict>> {
    breakdown_dict(py, &ParamBreakdown::from_config(&config.0))
}

/// Runs a freshly (Glorot) initialised R2H encoder on `features` (rows of equal
/// length) and returns the `width`-wide outputs in quarter-block layout.
#[pyfunction]
#[pyo3(signature = (features, width, activation="tanh", normalized=true, seed=0))]
fn r2h_forward(features: Vec<Vec<f64>>, width: usize, activation: &str, normalized: bool, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let rows = features.len();
    let dim = features.first().map_or(0, Vec::len);
    if rows == 0 || dim == 0 || features.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("features must be a non-empty list of equal-length rows"));
    }
    let act: Activation = activation.parse().map_err(to_py)?;
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = R2HEncoder::new(&mut store, "front", dim, width, act, normalized, quat::DEFAULT_NORM_EPS, &mut rng).map_err(to_py)?;
    let tape = Tape::no_grad();
    let x = Tensor::new(vec![rows, dim], features.concat()).map_err(to_py)?;
    let y = enc.forward(&tape, &store, tape.constant(x)).map_err(to_py)?.value();
    Ok(y.data().chunks(width).map(|r| r.to_vec()).collect())
}

/// Reads a QFEA or CSV feature file into a list of dicts.
#[pyfunction]
fn read_features<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyList>> {
    let utts = core_read_features(&path).map_err(to_py)?;
    let out = PyList::empty(py);
    for u in utts {
        let d = PyDict::new(py);
        d.set_item("id", &u.id)?;
        d.set_item("frames", u.frames())?;
        d.set_item("dim", u.dim)?;
        let rows: Vec<Vec<f32>> = u.features.chunks(u.dim).map(|r| r.to_vec()).collect();
        d.set_item("features", rows)?;
        d.set_item("labels", &u.labels)?;
        out.append(d)?;
    }
    Ok(out)
}

/// Writes synthetic `train.qfea`, `valid.qfea` and `test.qfea` into `out`.
#[pyfunction]
#[pyo3(signature = (out, seed=17, train=200, valid=50, test=50, classes=4, dim=40, delta_classes=2, noise=0.3, slope=0.15))]
#[allow(clippy::too_many_arguments)]
fn synth<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    train: usize,
    valid: usize,
    test: usize,
    classes: usize,
    dim: usize,
    delta_classes: usize,
    noise: f64,
    slope: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SynthSpec {
        classes,
        dim,
        delta_classes,
        noise,
        slope,
        train_utterances: train,
        valid_utterances: valid,
        test_utterances: test,
        seed,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec).map_err(to_py)?;
    write_synthetic(&out, &data).map_err(to_py)?;
    let d = PyDict::new(py);
    for name in ["train", "valid", "test"] {
        d.set_item(name, out.join(format!("{name}.qfea")))?;
    }
    Ok(d)
}

fn eval_dict<'py>(py: Python<'py>, r: &EvalResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("loss", r.loss)?;
    d.set_item("frame_error_rate", r.frame_error_rate)?;
    d.set_item("frames", r.frames)?;
    d.set_item("errors", r.errors)?;
    Ok(d)
}

fn run_train<T: Scalar>(cfg: &ModelConfig, train: &PathBuf, valid: &PathBuf, out: Option<&PathBuf>) -> qnn_core::Result<Vec<qnn_core::train::EpochReport>> {
    let train = core_read_features(train)?;
    let valid = core_read_features(valid)?;
    let mut model = AcousticModel::<T>::new(cfg)?;
    Ok(core_train(&mut model, &train, &valid, out.map(|p| p.as_path()))?.reports)
}

/// Trains a model; returns one dict per epoch. Writes checkpoints and
/// metrics when `out` is given.
#[pyfunction]
#[pyo3(signature = (config, train, valid, out=None))]
fn train<'py>(py: Python<'py>, config: &PyModelConfig, train: PathBuf, valid: PathBuf, out: Option<PathBuf>) -> PyResult<Bound<'py, PyList>> {
    let cfg = config.0.clone();
    let reports = py
        .detach(|| match cfg.precision {
            Precision::F32 => run_train::<f32>(&cfg, &train, &valid, out.as_ref()),
            Precision::F64 => run_train::<f64>(&cfg, &train, &valid, out.as_ref()),
        })
        .map_err(to_py)?;
    let list = PyList::empty(py);
    for r in reports {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("train_loss", r.train_loss)?;
        d.set_item("val_loss", r.val_loss)?;
        d.set_item("val_fer", r.val_fer)?;
        d.set_item("lr", r.lr)?;
        d.set_item("config_digest", &r.config_digest)?;
        d.set_item("seed", r.seed)?;
        d.set_item("seconds", r.seconds)?;
        list.append(d)?;
    }
    Ok(list)
}

/// Loss and frame error rate of a checkpoint on a feature file.
#[pyfunction]
#[pyo3(signature = (checkpoint, path, batch_size=None))]
fn evaluate<'py>(py: Python<'py>, checkpoint: PathBuf, path: PathBuf, batch_size: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let result = py
        .detach(|| -> qnn_core::Result<EvalResult> {
            let ck = checkpoint::read(&checkpoint)?;
            let utts = core_read_features(&path)?;
            let batch = batch_size.unwrap_or(ck.config.batch_size);
            match ck.config.precision {
                Precision::F32 => core_evaluate(&ck.into_model::<f32>()?, &utts, batch),
                Precision::F64 => core_evaluate(&ck.into_model::<f64>()?, &utts, batch),
            }
        })
        .map_err(to_py)?;
    eval_dict(py, &result)
}

/// Runs the self checks; returns `{"ok": bool, "suites": [...], "first_failure": ...}`.
#[pyfunction]
#[pyo3(signature = (seed=7, inject_fault="none"))]
fn selfcheck<'py>(py: Python<'py>, seed: u64, inject_fault: &str) -> PyResult<Bound<'py, PyDict>> {
    let fault: Fault = inject_fault.parse().map_err(to_py)?;
    let report = py.detach(|| run_selfcheck(fault, seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("ok", report.ok())?;
    let suites = PyList::empty(py);
    for s in &report.suites {
        let sd = PyDict::new(py);
        sd.set_item("suite", s.suite)?;
        sd.set_item("passed", s.passed)?;
        sd.set_item("failed", s.failed)?;
        suites.append(sd)?;
    }
    d.set_item("suites", suites)?;
    match report.first_failure() {
        Some(f) => d.set_item("first_failure", (&f.case, &f.detail))?,
        None => d.set_item("first_failure", py.None())?,
    }
    Ok(d)
}

#[pymodule]
fn qnn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyQuaternion>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_function(wrap_pyfunction!(hamilton, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(r2h_forward, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(selfcheck, m)?)?;
    Ok(())
}
