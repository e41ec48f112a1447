//! Python bindings: configuration, the staged pipeline over in-memory item
//! batches, packaging, statistics and answer scoring.
//!
//! Structured values cross the boundary as plain Python objects decoded from
//! the same JSON the CLI writes, so the two front ends cannot drift apart.

use std::path::PathBuf;

use hopweave::dataset::{compute_stats, read_dataset, DatasetSample};
use hopweave::eval::{self, EvalMode};
use hopweave::llm::Gateway;
use hopweave::pipeline::{self, PipelineConfig, PipelineError, PipelineItem, StageCounts};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(hopweave_py, HopweaveError, PyException, "A pipeline stage or input failed.");
create_exception!(hopweave_py, ProviderError, HopweaveError, "The language-model provider failed.");

fn to_py_err(e: PipelineError) -> PyErr {
    if e.is_provider_failure() {
        ProviderError::new_err(e.to_string())
    } else {
        HopweaveError::new_err(e.to_string())
    }
}

fn to_python<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| HopweaveError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Pipeline configuration; every field has a default.
#[pyclass(name = "Config", module = "hopweave_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => serde_json::from_str(text).map_err(|e| HopweaveError::new_err(e.to_string()))?,
            None => PipelineConfig::default(),
        };
        inner.validate().map_err(to_py_err)?;
        Ok(Self { inner })
    }

    /// Load a config file; relative recorded-response paths resolve against it.
    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: PipelineConfig::from_json_file(&path).map_err(to_py_err)? })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn sha256(&self) -> String {
        self.inner.sha256()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| HopweaveError::new_err(e.to_string()))
    }
}

/// A batch of pipeline items, as read from or written to a stage file.
#[pyclass(name = "Items", module = "hopweave_py", skip_from_py_object)]
#[derive(Clone)]
struct PyItems {
    inner: Vec<PipelineItem>,
}

#[pymethods]
impl PyItems {
    #[staticmethod]
    fn read(paths: Vec<PathBuf>) -> PyResult<Self> {
        Ok(Self { inner: pipeline::read_items(&paths).map_err(to_py_err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        pipeline::write_items(&path, &self.inner).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Items still in flight (not dropped by an earlier stage).
    fn live(&self) -> usize {
        self.inner.len() - StageCounts::of(&self.inner).dropped
    }

    fn ids(&self) -> Vec<String> {
        self.inner.iter().map(|i| i.item_id.clone()).collect()
    }

    /// Items as plain dictionaries.
    fn to_list(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_python(py, &self.inner)
    }

    fn audit_bundles(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_python(py, &pipeline::audit_bundles(&self.inner).map_err(to_py_err)?)
    }
}

/// Runs stages with one configuration and one provider gateway.
#[pyclass(name = "Pipeline", module = "hopweave_py", unsendable)]
struct PyPipeline {
    config: PipelineConfig,
    gateway: Gateway,
}

type StageFn = fn(Vec<PipelineItem>, &Gateway, &PipelineConfig) -> Result<Vec<PipelineItem>, PipelineError>;

impl PyPipeline {
    fn step(&self, items: &PyItems, stage: StageFn) -> PyResult<PyItems> {
        Ok(PyItems { inner: stage(items.inner.clone(), &self.gateway, &self.config).map_err(to_py_err)? })
    }
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<PyConfig>) -> PyResult<Self> {
        let config = config.map(|c| c.inner).unwrap_or_default();
        let gateway = pipeline::build_gateway(&config, None).map_err(to_py_err)?;
        Ok(Self { config, gateway })
    }

    fn ingest_scenes(&self, paths: Vec<PathBuf>) -> PyResult<PyItems> {
        Ok(PyItems { inner: pipeline::ingest_scenes(&paths, &self.config).map_err(to_py_err)? })
    }

    fn augment(&self, items: &PyItems) -> PyResult<PyItems> {
        self.step(items, pipeline::augment)
    }

    fn gen_context(&self, items: &PyItems) -> PyResult<PyItems> {
        self.step(items, pipeline::gen_context)
    }

    fn gen_qa(&self, items: &PyItems) -> PyResult<PyItems> {
        self.step(items, pipeline::gen_qa)
    }

    fn filter(&self, items: &PyItems) -> PyResult<PyItems> {
        self.step(items, pipeline::filter)
    }

    /// Re-validate, split and return the dataset samples as dictionaries.
    fn package(&self, py: Python<'_>, items: &PyItems) -> PyResult<Py<PyAny>> {
        to_python(py, &pipeline::package(&items.inner, &self.config).map_err(to_py_err)?)
    }

    /// Package and write `dataset.jsonl`, `train.jsonl` and `test.jsonl` into `out_dir`.
    fn write_package(&self, items: &PyItems, out_dir: PathBuf) -> PyResult<usize> {
        let samples = pipeline::package(&items.inner, &self.config).map_err(to_py_err)?;
        std::fs::create_dir_all(&out_dir).map_err(|e| HopweaveError::new_err(e.to_string()))?;
        pipeline::write_package(&samples, &pipeline::PackageFiles::in_dir(&out_dir)).map_err(to_py_err)?;
        Ok(samples.len())
    }
}

/// Per-domain, per-split statistics of a dataset file.
#[pyfunction]
fn dataset_stats(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let samples: Vec<DatasetSample> = read_dataset(&path).map_err(|e| HopweaveError::new_err(e.to_string()))?;
    to_python(py, &compute_stats(&samples))
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    eval::normalize_answer(text)
}

#[pyfunction]
fn exact_match(prediction: &str, gold: &str) -> f64 {
    eval::exact_match(prediction, gold)
}

#[pyfunction]
fn token_f1(prediction: &str, gold: &str) -> f64 {
    eval::token_f1(prediction, gold)
}

/// Pull the final answer out of a model response (`mode` is `direct` or `cot`).
#[pyfunction]
fn extract_final_answer(response: &str, mode: &str) -> PyResult<String> {
    let mode = match mode {
        "direct" => EvalMode::DirectAnswer,
        "cot" => EvalMode::Cot,
        other => return Err(HopweaveError::new_err(format!("unknown mode {other:?}"))),
    };
    Ok(eval::extract_final_answer(response, mode))
}

#[pymodule]
fn hopweave_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HopweaveError", m.py().get_type::<HopweaveError>())?;
    m.add("ProviderError", m.py().get_type::<ProviderError>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyItems>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(dataset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(extract_final_answer, m)?)?;
    Ok(())
}
