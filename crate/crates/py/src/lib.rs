//! Python bindings for `bicl`.
//!
//! Conversations cross the boundary as plain dicts in the JSONL schema
//! (`id`, `utterances` with `index`, `speaker`, `text`, optional
//! `session_id`); reports come back as dicts.

use bicl::corpus::{self, Conversation, SyntheticSpec};
use bicl::trainer::{self, Checkpoint, KSelector, Mode, TrainConfig};
use bicl::{clustering, gradsuite, metrics, Error};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn to_json(value: &Bound<'_, PyAny>) -> PyResult<String> {
    value.py().import("json")?.call_method1("dumps", (value,))?.extract()
}

/// Parses a list of conversation dicts.
pub fn conversations_from_json(text: &str) -> Result<Vec<Conversation>, Error> {
    let mut out: Vec<Conversation> =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("conversation list: {e}")))?;
    for c in &mut out {
        c.fill_tokens();
    }
    Ok(out)
}

fn conversations(value: &Bound<'_, PyAny>) -> PyResult<Vec<Conversation>> {
    conversations_from_json(&to_json(value)?).map_err(to_py)
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    from_json(py, &text)
}

fn kwargs_entries(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let Some(kwargs) = kwargs else { return Ok(Vec::new()) };
    kwargs
        .iter()
        .map(|(k, v)| {
            let value = if let Ok(items) = v.cast::<PyList>() {
                items.iter().map(|x| x.str().map(|s| s.to_string())).collect::<PyResult<Vec<_>>>()?.join(",")
            } else {
                v.str()?.to_string()
            };
            Ok((k.extract()?, value))
        })
        .collect()
}

#[pyfunction]
#[pyo3(signature = (text, max_len = 50))]
fn tokenize(text: &str, max_len: usize) -> Vec<String> {
    corpus::tokenize(text, max_len)
}

#[pyfunction]
fn nmi(truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<f64> {
    metrics::nmi(&metrics::Partition(truth), &metrics::Partition(predicted)).map_err(to_py)
}

#[pyfunction]
fn ari(truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<f64> {
    metrics::ari(&metrics::Partition(truth), &metrics::Partition(predicted)).map_err(to_py)
}

#[pyfunction]
fn shen_f(truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<f64> {
    metrics::shen_f(&metrics::Partition(truth), &metrics::Partition(predicted)).map_err(to_py)
}

/// Returns `(accuracy, mean absolute error)` of predicted session counts.
#[pyfunction]
fn k_report(gold: Vec<usize>, predicted: Vec<usize>) -> PyResult<(f64, f64)> {
    let r = metrics::k_report(&gold, &predicted).map_err(to_py)?;
    Ok((r.acc, r.mae))
}

/// Returns `(assignment, centroids, inertia)`.
#[pyfunction]
#[pyo3(signature = (points, k, seed = 0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let c = clustering::kmeans(&points, k, seed).map_err(to_py)?;
    Ok((c.assignment, c.centroids, c.inertia))
}

/// Returns `(column for each row, total cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let m = clustering::hungarian(&cost).map_err(to_py)?;
    Ok((m.columns, m.cost))
}

#[pyfunction]
#[pyo3(signature = (points, k_max, seed = 0))]
fn elbow_k(points: Vec<Vec<f64>>, k_max: usize, seed: u64) -> PyResult<usize> {
    clustering::elbow_k(&points, k_max, seed).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (points, k_max, seed = 0))]
fn silhouette_k(points: Vec<Vec<f64>>, k_max: usize, seed: u64) -> PyResult<usize> {
    clustering::silhouette_k(&points, k_max, seed).map_err(to_py)
}

/// Generates labelled entangled conversations; keyword arguments override
/// generator settings (`num_conversations=20`, `session_length="2-4"`).
#[pyfunction]
#[pyo3(signature = (seed = 0, **overrides))]
fn generate_synthetic<'py>(
    py: Python<'py>,
    seed: u64,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec = SyntheticSpec::default();
    for (k, v) in kwargs_entries(overrides)? {
        spec.apply(&k, &v).map_err(to_py)?;
    }
    let data = corpus::generate_synthetic(&spec, seed).map_err(to_py)?;
    serialize(py, &data)
}

/// Runs every finite-difference check; returns `{name: max relative error}`.
#[pyfunction]
#[pyo3(signature = (seed = 7))]
fn gradient_suite(seed: u64) -> PyResult<Vec<(String, f64)>> {
    let rows = gradsuite::gradient_suite(seed).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.name, r.max_relative_error)).collect())
}

/// Training hyperparameters. Keyword arguments use the config-file keys.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = TrainConfig::default();
        for (k, v) in kwargs_entries(kwargs)? {
            inner.set(&k, &v).map_err(to_py)?;
        }
        inner.validate().map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, &value.str()?.to_string()).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Config({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

fn selector(name: &str) -> PyResult<KSelector> {
    name.parse().map_err(to_py)
}

/// A trained model together with its configuration and optimiser state.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Trains on a list of conversation dicts; returns the checkpoint and
    /// the per-step loss log.
    #[staticmethod]
    #[pyo3(signature = (conversations, config, mode = None))]
    fn train<'py>(
        py: Python<'py>,
        conversations: &Bound<'py, PyAny>,
        config: &PyConfig,
        mode: Option<&str>,
    ) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
        let data = self::conversations(conversations)?;
        let mut cfg = config.inner.clone();
        if let Some(m) = mode {
            cfg.mode = m.parse::<Mode>().map_err(to_py)?;
        }
        let table = trainer::embedding_table(&cfg).map_err(to_py)?;
        let out = py.detach(|| trainer::train(&data, &cfg, &table)).map_err(to_py)?;
        let log = serialize(py, &out.log)?;
        Ok((PyCheckpoint { inner: out.checkpoint }, log))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    /// Returns `(k, session labels)` per conversation.
    #[pyo3(signature = (conversations, k_selector = "predictor"))]
    fn disentangle(&self, conversations: &Bound<'_, PyAny>, k_selector: &str) -> PyResult<Vec<(usize, Vec<usize>)>> {
        let data = self::conversations(conversations)?;
        let cfg = &self.inner.config;
        let table = trainer::embedding_table(cfg).map_err(to_py)?;
        let out = trainer::disentangle_all(&data, &self.inner.model, cfg, &table, selector(k_selector)?).map_err(to_py)?;
        Ok(out.into_iter().map(|d| (d.k, d.partition.0)).collect())
    }

    #[pyo3(signature = (conversations, k_selector = "predictor"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        conversations: &Bound<'py, PyAny>,
        k_selector: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = self::conversations(conversations)?;
        let cfg = &self.inner.config;
        let table = trainer::embedding_table(cfg).map_err(to_py)?;
        let report = trainer::evaluate(&data, &self.inner.model, cfg, &table, selector(k_selector)?).map_err(to_py)?;
        serialize(py, &report)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let bytes = self.inner.to_bytes().map_err(to_py)?;
        Ok(pyo3::types::PyBytes::new(py, &bytes))
    }
}

#[pymodule]
#[pyo3(name = "bicl")]
fn bicl_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(ari, m)?)?;
    m.add_function(wrap_pyfunction!(shen_f, m)?)?;
    m.add_function(wrap_pyfunction!(k_report, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(elbow_k, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette_k, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
