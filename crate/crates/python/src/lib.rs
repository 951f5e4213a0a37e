//! Python bindings. Structured results cross the boundary as JSON text.

use std::path::PathBuf;

use openset_core::evalbench::{MetricReport, PredictionRecord};
use openset_core::harness::{self, ExperimentConfig};
use openset_core::Error;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn config(toml: Option<&str>, overrides: Vec<String>) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_toml(toml.unwrap_or(""), &overrides).map_err(py_err)
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    openset_core::autodiff::digamma(x).map_err(py_err)
}

/// Default experiment configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(py_err)
}

/// Open-set metrics for un-thresholded predictions. Labels use `K` for
/// unknown and `K + 1` for background.
#[pyfunction]
#[pyo3(signature = (labels, predicted, confidence, num_known, num_base=None, theta=0.0))]
fn metrics(
    labels: Vec<usize>,
    predicted: Vec<usize>,
    confidence: Vec<f64>,
    num_known: usize,
    num_base: Option<usize>,
    theta: f64,
) -> PyResult<String> {
    if predicted.len() != confidence.len() {
        return Err(PyValueError::new_err("predicted and confidence differ in length"));
    }
    let preds: Vec<PredictionRecord> = predicted
        .into_iter()
        .zip(confidence)
        .enumerate()
        .map(|(id, (predicted, confidence))| PredictionRecord { id, predicted, confidence })
        .collect();
    let report =
        MetricReport::compute(&preds, &labels, num_known, num_base.unwrap_or(num_known), theta).map_err(py_err)?;
    to_json(&report)
}

/// Base training, few-shot training and evaluation into `out`; returns the
/// metric report.
#[pyfunction]
#[pyo3(signature = (out, config_toml=None, overrides=Vec::new()))]
fn run_pipeline(py: Python<'_>, out: PathBuf, config_toml: Option<&str>, overrides: Vec<String>) -> PyResult<String> {
    let cfg = config(config_toml, overrides)?;
    let outcome = py.detach(|| harness::run_pipeline(&cfg, &out)).map_err(py_err)?;
    to_json(&outcome.metrics)
}

#[pymodule]
fn openset_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip_as_json() {
        let json = metrics(vec![0, 0, 2, 3], vec![0, 1, 2, 0], vec![0.9, 0.8, 0.7, 0.6], 2, None, 0.0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["recall_unknown"], 1.0);
        assert_eq!(v["aose"], 0);
    }

    #[test]
    fn default_config_parses_back() {
        let text = default_config().unwrap();
        assert_eq!(config(Some(&text), Vec::new()).unwrap(), ExperimentConfig::default());
    }
}
