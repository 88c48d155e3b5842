use ofb_core::bimask::{self, LambdaSchedule};
use ofb_core::commands;
use ofb_core::config::RunConfig;
use ofb_core::regularizers;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Shannon entropy of a probability vector.
#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    regularizers::entropy(&p).map_err(value_err)
}

/// Tangent-activated normalized variance; 0 for a single candidate.
#[pyfunction]
fn psi(p: Vec<f64>) -> PyResult<f64> {
    regularizers::variance_term(&p).map(|(v, _)| v).map_err(value_err)
}

#[pyfunction]
fn target_variance(d: usize) -> f64 {
    regularizers::target_variance(d)
}

#[pyfunction]
#[pyo3(signature = (g, tau, slack = 0.0, delta = 0.0))]
fn budget_penalty(g: f64, tau: f64, slack: f64, delta: f64) -> f64 {
    regularizers::budget_penalty(g, tau, slack, delta)
}

/// Per-unit keep probabilities for step probabilities `p` over `widths`,
/// ordered by `importance`.
#[pyfunction]
fn sparsity_scores(p: Vec<f64>, widths: Vec<usize>, importance: Vec<f64>) -> PyResult<Vec<f64>> {
    if p.len() != widths.len() {
        return Err(value_err("p and widths differ in length"));
    }
    if widths.iter().any(|&w| w > importance.len()) {
        return Err(value_err("a width exceeds the number of units"));
    }
    Ok(bimask::sparsity_scores(&p, &widths, &importance))
}

#[pyfunction]
fn lambda_at(total_steps: usize, t: usize) -> f64 {
    LambdaSchedule::new(total_steps).lambda(t)
}

/// Default run configuration as `key = value` text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().snapshot()
}

/// Theorem suite report as JSON.
#[pyfunction]
#[pyo3(signature = (samples = 1000, dims = vec![2, 4, 8, 16], seed = 0))]
fn theorems(samples: usize, dims: Vec<usize>, seed: u64) -> PyResult<String> {
    let (r, _) = commands::cmd_theorems(samples, &dims, seed, None).map_err(value_err)?;
    serde_json::to_string(&r).map_err(value_err)
}

/// Gradient check report as JSON.
#[pyfunction]
fn gradcheck() -> PyResult<String> {
    let r = commands::gradcheck_report(None).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string(&r).map_err(value_err)
}

/// Runs the search with `config` text (may be empty) into `out_dir`; returns
/// the CLI exit status.
#[pyfunction]
#[pyo3(signature = (out_dir, config = ""))]
fn search(py: Python<'_>, out_dir: &str, config: &str) -> PyResult<i32> {
    let mut cfg = RunConfig::parse(config).map_err(value_err)?;
    cfg.output_dir = out_dir.into();
    py.detach(|| commands::cmd_search(&cfg)).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn ofb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(psi, m)?)?;
    m.add_function(wrap_pyfunction!(target_variance, m)?)?;
    m.add_function(wrap_pyfunction!(budget_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_scores, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_at, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(theorems, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    Ok(())
}
